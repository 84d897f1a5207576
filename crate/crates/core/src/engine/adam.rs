use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f32`, the update is
/// computed in `f64` and rounded once.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// Applies one update. `grads[i] == None` leaves parameter `i` (and its
    /// moments) untouched.
    pub fn update(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Option<&Tensor<f32>>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} moment slots, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = grads[i] else { continue };
            if grad.shape() != param.shape() || self.first[i].shape() != param.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                ));
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g as f64;
                let m1 = beta1 * *m as f64 + (1.0 - beta1) * g;
                let v1 = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = m1 as f32;
                *v = v1 as f32;
                let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                *p = (*p as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
