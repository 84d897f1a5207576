//! Dense tensors, reverse-mode differentiation and the layer primitives the
//! encoder and decoder are built from.

mod adam;
mod checkpoint;
mod graph;
pub mod kernels;
mod layers;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{read_bytes, read_exact, read_u32, write_bytes};
pub use graph::{bernoulli_kl, BatchNormStats, Graph, Mode, NodeId, NodeKind};
pub use layers::{BatchNorm, Conv2d, Dense, Param, ParamId, ParamStore, ResidualBlock, Session};
pub use tensor::{Real, Tensor};
