use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update applied to `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch {
                params: params.len(),
                grads: grads.len(),
                state: self.m.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Value-returning form of [`AdamState::update`].
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(Vec<f64>, AdamState)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    s.update(&mut p, grads, lr, cfg)?;
    Ok((p, s))
}
