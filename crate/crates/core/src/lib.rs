//! Spatial sparsity bottlenecks for learning interpretable intermediate
//! representations from end-to-end supervision.
//!
//! The crate bundles a small reverse-mode tensor engine ([`engine`]), the
//! quantile-thresholded sparsity layer ([`sparsity`]), the validation-gated
//! density controller ([`annealing`]), a synthetic glyph-circle domain
//! ([`datagen`]), encoder/decoder models with several bottleneck kinds
//! ([`models`]), motif and end-to-end metrics ([`metrics`]) and the training
//! loop ([`training`]).

pub mod annealing;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod sparsity;
pub mod training;

pub use error::{Error, Result};
