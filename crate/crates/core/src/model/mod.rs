//! Velocity-field regressor `f_θ(C_τ, τ, e)` and its optimizer.

use nalgebra::DMatrix;

use crate::error::Result;

mod adam;
mod mlp;

pub use adam::{clip_gradient, AdamConfig, AdamState};
pub use mlp::{tau_embedding, Activation, Architecture, Mlp, MlpTape};

/// A batch of network inputs, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch {
    /// `vec(C_τ)` per column, column-major over the `(K+1) × d_a` matrix.
    pub x: DMatrix<f64>,
    pub tau: Vec<f64>,
    /// Conditioning vector `e` per column.
    pub cond: DMatrix<f64>,
}

impl FieldBatch {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Differentiable map from `(C_τ, τ, e)` to a velocity in coefficient space.
pub trait VelocityField {
    type Tape;

    fn coeff_len(&self) -> usize;

    fn cond_len(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Output is `coeff_len × batch`.
    fn forward(&self, batch: &FieldBatch) -> Result<(DMatrix<f64>, Self::Tape)>;

    /// Gradient of `Σ upstream ⊙ output` with respect to the parameters.
    fn backward(&self, tape: &Self::Tape, upstream: &DMatrix<f64>) -> Vec<f64>;

    fn predict(&self, batch: &FieldBatch) -> Result<DMatrix<f64>> {
        Ok(self.forward(batch)?.0)
    }
}
