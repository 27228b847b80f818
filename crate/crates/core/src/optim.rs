//! First-order optimizers over a [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent, no momentum.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state. Moment buffers are created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Descends along the accumulated gradients with step size `lr`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in store.iter_mut() {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.steps as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for ((p, m), s) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for k in 0..m.len() {
                        let g = p.grad.data()[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        s[k] = beta2 * s[k] + (1.0 - beta2) * g * g;
                        let mhat = m[k] / c1;
                        let shat = s[k] / c2;
                        p.value.data_mut()[k] -= lr * mhat / (math::sqrt(shat) + eps);
                    }
                }
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
