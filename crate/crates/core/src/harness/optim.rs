//! Per-episode optimizers. State lives as long as one episode.

use serde::{Deserialize, Serialize};

use crate::policy::{GradVector, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("non-finite gradient")]
pub struct NonFiniteGradient;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    adamw: AdamWParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, adamw: AdamWParams, param_count: usize) -> Self {
        Self { kind, lr, adamw, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update. On a non-finite gradient nothing changes.
    pub fn step(&mut self, policy: &mut Policy, grad: &GradVector) -> Result<(), NonFiniteGradient> {
        if !grad.is_finite() {
            return Err(NonFiniteGradient);
        }
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in policy.logits_mut().iter_mut().zip(grad.values()) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adamw => {
                let AdamWParams { beta1, beta2, eps, weight_decay } = self.adamw;
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t);
                let bc2 = 1.0 - beta2.powi(self.t);
                let state = self.m.iter_mut().zip(self.v.iter_mut());
                for ((w, &g), (m, v)) in policy.logits_mut().iter_mut().zip(grad.values()).zip(state) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    // decoupled decay
                    *w -= lr * weight_decay * *w;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
