use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "adam hyperparameters out of range: {self:?}"
            )))
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn for_tensor(t: &Tensor) -> Self {
        Self::new(t.numel())
    }
}

/// One bias-corrected Adam update of every parameter from its stored gradient.
///
/// All gradients are checked before anything is modified, so a failure leaves
/// parameters and states untouched.
pub fn adam_step(params: &mut [Tensor], states: &mut [AdamState], cfg: &AdamConfig) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::domain(format!(
            "{} parameters but {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    for (i, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        if p.grad().is_none() {
            return Err(Error::domain(format!("parameter {i} has no gradient")));
        }
        if s.m.len() != p.numel() || s.v.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), &[s.m.len()]));
        }
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        s.step_count += 1;
        let t = s.step_count as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let grad = p.grad().expect("checked above").to_vec();
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(&mut s.m)
            .zip(&mut s.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
