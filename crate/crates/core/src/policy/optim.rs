//! AdamW with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{GradVector, PolicyParams};
use crate::{FipoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Global-norm clip threshold applied before the moment update.
    pub grad_clip: f64,
    /// Linear warmup length in training iterations; constant afterwards.
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 10,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate used during training iteration `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((iteration + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(FipoError::config("optim.lr", "must be positive"));
        }
        for (key, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(FipoError::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(FipoError::config("optim.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(FipoError::config("optim.weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(FipoError::config("optim.grad_clip", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// One AdamW update with learning rate `lr`. Returns the gradient norm after
/// clipping.
pub fn optimizer_step(
    params: &mut PolicyParams,
    state: &mut OptimizerState,
    grad: &GradVector,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<f64> {
    let n = params.len();
    if grad.values().len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(FipoError::Input(format!(
            "shape mismatch: params {n}, grad {}, moments {}/{}",
            grad.values().len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    let scale = if grad.norm() > cfg.grad_clip {
        cfg.grad_clip / grad.norm()
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let values = params.values_mut();
    for i in 0..n {
        let g = grad.values()[i] * scale;
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        values[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * values[i]);
    }
    Ok(grad.norm() * scale)
}
