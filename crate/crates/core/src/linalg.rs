//! Symmetric positive-definite solves with a condition guard.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{FlashError, Result};

/// Matrices whose 2-norm condition exceeds this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Cholesky factor of an SPD matrix together with its condition estimate.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let condition = spd_condition(m);
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(FlashError::SingularFit { condition });
        }
        let chol = Cholesky::new(m.clone()).ok_or(FlashError::SingularFit { condition })?;
        Ok(Self { chol, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }
}

/// `λ_max / λ_min` of a symmetric matrix; infinite when `λ_min ≤ 0`.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = m.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
