//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

pub mod gradcheck;
pub mod metric_oracle;
pub mod tracking;

/// `sites * channels * (H(delta) + eta * delta)` in bits, with the
/// `(1 - d) ln(1 - d)` term summed as the all-positive series
/// `-d + sum_{k >= 2} d^k / (k (k - 1))`.
pub fn entropy_bound_series(sites: f64, channels: f64, delta: f64, eta: f64) -> f64 {
    let mut tail = 0.0;
    let mut power = delta;
    for k in 2..2000u32 {
        power *= delta;
        let term = power / (k as f64 * (k as f64 - 1.0));
        tail += term;
        if term < 1e-30 * tail {
            break;
        }
    }
    let nats = -(delta * delta.ln()) - (-delta + tail);
    sites * channels * (nats / std::f64::consts::LN_2 + eta * delta)
}
