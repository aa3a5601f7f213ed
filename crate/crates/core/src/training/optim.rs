use serde::{Deserialize, Serialize};

use crate::numkernel::Tensor;
use crate::transformer::TransformerWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `θ -= lr · decay · θ`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &TransformerWeights<Tensor>) -> Self {
        let mut first = Vec::new();
        params.visit(|_, t| first.push(Tensor::zeros(t.shape())));
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    /// One update from accumulated gradients scaled by `grad_scale`.
    pub fn update(&mut self, params: &mut TransformerWeights<Tensor>, cfg: &AdamConfig, lr: f64, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut(|_, p| {
            let m = first[idx].data_mut();
            let v = second[idx].data_mut();
            idx += 1;
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { return };
            if !p.requires_grad() {
                return;
            }
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k] * grad_scale;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
            }
        });
    }
}
