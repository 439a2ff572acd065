use serde::{Deserialize, Serialize};

use crate::error::{FlashError, Result};

/// Geometry of one fitting window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitWindowConfig {
    /// Executed sparse steps per inference, `T_a`.
    pub exec_steps: usize,
    /// Supervised overlap before the execution interval, `μ_pre`.
    pub overlap_pre: usize,
    /// Supervised overlap after the execution interval, `μ_post`.
    pub overlap_post: usize,
    /// Regression-only padding on each side, `δ`.
    pub padding: usize,
    /// Sparse temporal stride `k` in expert steps.
    pub stride: usize,
    /// Expert sampling frequency in Hz.
    pub expert_hz: f64,
    /// Continuity order `r` enforced at each anchor.
    pub continuity_order: usize,
}

impl Default for FitWindowConfig {
    fn default() -> Self {
        Self {
            exec_steps: 8,
            overlap_pre: 2,
            overlap_post: 2,
            padding: 1,
            stride: 4,
            expert_hz: 50.0,
            continuity_order: 1,
        }
    }
}

impl FitWindowConfig {
    /// Number of sparse fitting nodes.
    pub fn h_poly(&self) -> usize {
        self.padding + self.overlap_pre + self.exec_steps + self.overlap_post + self.padding
    }

    /// Node index of the front anchor.
    pub fn front_index(&self) -> usize {
        self.padding + self.overlap_pre
    }

    /// Node index of the rear anchor; equals `h_poly()` or more when the window
    /// has no tail beyond the execution interval.
    pub fn rear_index(&self) -> usize {
        self.front_index() + self.exec_steps
    }

    fn node_to_s(&self, index: usize) -> f64 {
        index as f64 / (self.h_poly() - 1) as f64
    }

    pub fn s_front(&self) -> f64 {
        self.node_to_s(self.front_index())
    }

    pub fn s_rear(&self) -> f64 {
        self.node_to_s(self.rear_index())
    }

    /// Physical duration spanned by `s ∈ [0, 1]` when played at stride `k`.
    pub fn span_seconds(&self, stride: f64) -> f64 {
        stride * (self.h_poly() - 1) as f64 / self.expert_hz
    }

    /// Physical duration of the execution interval when played at stride `k`.
    pub fn exec_seconds(&self, stride: f64) -> f64 {
        stride * self.exec_steps as f64 / self.expert_hz
    }

    /// Expert steps consumed per inference call at the training stride.
    pub fn steps_per_call(&self) -> usize {
        self.stride * self.exec_steps
    }

    /// Absolute expert step of each fitting node for current step `t`; the
    /// front anchor lands on `t + 1`.
    pub fn node_steps(&self, t: i64) -> Vec<i64> {
        let k = self.stride as i64;
        let front = self.front_index() as i64;
        (0..self.h_poly() as i64).map(|i| t + 1 + k * (i - front)).collect()
    }

    /// Rows in the anchor system, `2 (r + 1)`.
    pub fn constraint_rows(&self) -> usize {
        2 * (self.continuity_order + 1)
    }

    pub fn check_continuity(&self, degree: usize) -> Result<()> {
        let rows = self.constraint_rows();
        if rows > degree + 1 {
            return Err(FlashError::InfeasibleConstraint {
                order: self.continuity_order,
                degree,
                rows,
                coeffs: degree + 1,
            });
        }
        Ok(())
    }

    /// Checks the geometry for a basis of the given degree.
    pub fn validate(&self, degree: usize) -> Result<()> {
        if self.exec_steps == 0 {
            return Err(FlashError::Parameter("exec_steps must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(FlashError::Parameter("stride must be at least 1".into()));
        }
        if !(self.expert_hz > 0.0 && self.expert_hz.is_finite()) {
            return Err(FlashError::Parameter("expert_hz must be positive".into()));
        }
        if self.h_poly() < degree + 2 {
            return Err(FlashError::Parameter(format!(
                "H_poly = {} must be at least K + 2 = {}",
                self.h_poly(),
                degree + 2
            )));
        }
        self.check_continuity(degree)
    }
}
