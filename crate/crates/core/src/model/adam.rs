use serde::{Deserialize, Serialize};

use crate::error::{FlashError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(FlashError::Parameter(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Applies one bias-corrected update in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(FlashError::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(FlashError::TrainingDivergence {
                index: i,
                what: "parameter became non-finite after update".into(),
            });
        }
        Ok(())
    }
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradient(grad: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(c) = max_norm {
        if norm > c {
            let scale = c / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}
