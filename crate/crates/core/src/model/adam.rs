use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates; `step` counts applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }
}

impl Adam {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("Adam hyperparameters out of range"))
        }
    }

    pub fn step(&self, state: &mut AdamState, params: &mut ModelParams, grads: &ModelParams) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let tensors = params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(state.m.tensors.iter_mut().zip(state.v.tensors.iter_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
