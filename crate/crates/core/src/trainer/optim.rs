// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::model::ModelParams;

use super::config::OptimizerConfig;

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: ModelParams,
    second: ModelParams,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, like: &ModelParams) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let arrays = params.slices_mut().into_iter().zip(grads.slices());
        let moments = self
            .first
            .slices_mut()
            .into_iter()
            .zip(self.second.slices_mut());
        for ((p, g), (m, v)) in arrays.zip(moments) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
