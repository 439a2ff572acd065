use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::CoeffMatrix;
use crate::error::{FlashError, Result};

/// Lower bound on any per-order scale.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Per-Legendre-order scales, fitted once on the training corpus and then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleNormalizer {
    scales: Vec<f64>,
}

impl ScaleNormalizer {
    /// Population standard deviation of each row across every matrix and
    /// action dimension, floored at [`SCALE_FLOOR`].
    pub fn fit<'a, I>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a CoeffMatrix>,
    {
        let corpus: Vec<&CoeffMatrix> = corpus.into_iter().collect();
        let first = corpus
            .first()
            .ok_or_else(|| FlashError::Parameter("cannot fit a normalizer on an empty corpus".into()))?;
        let rows = first.values().nrows();
        for c in &corpus {
            if c.values().nrows() != rows {
                return Err(FlashError::Shape(format!(
                    "corpus mixes degrees: {rows} vs {} rows",
                    c.values().nrows()
                )));
            }
            if c.is_normalized() {
                return Err(FlashError::Parameter("normalizer must be fitted on raw coefficients".into()));
            }
        }
        let scales = (0..rows)
            .map(|i| {
                let values: Vec<f64> = corpus
                    .iter()
                    .flat_map(|c| c.values().row(i).iter().copied().collect::<Vec<_>>())
                    .collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                var.sqrt().max(SCALE_FLOOR)
            })
            .collect();
        Ok(Self { scales })
    }

    /// Builds a normalizer directly from known scales.
    pub fn from_scales(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(FlashError::Parameter("scales must be positive and finite".into()));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn rows(&self) -> usize {
        self.scales.len()
    }

    fn check(&self, v: &DMatrix<f64>) -> Result<()> {
        if v.nrows() != self.scales.len() {
            return Err(FlashError::Shape(format!(
                "normalizer has {} rows, matrix has {}",
                self.scales.len(),
                v.nrows()
            )));
        }
        Ok(())
    }

    /// Divides row `j` by its scale.
    pub fn normalize_values(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(v)?;
        Ok(DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / self.scales[i]))
    }

    /// Multiplies row `j` by its scale.
    pub fn denormalize_values(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(v)?;
        Ok(DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * self.scales[i]))
    }

    pub fn normalize(&self, c: &CoeffMatrix) -> Result<CoeffMatrix> {
        if c.is_normalized() {
            return Err(FlashError::Parameter("matrix is already normalized".into()));
        }
        CoeffMatrix::with_flag(self.normalize_values(c.values())?, c.window().copied(), true)
    }

    pub fn denormalize(&self, c: &CoeffMatrix) -> Result<CoeffMatrix> {
        if !c.is_normalized() {
            return Err(FlashError::Parameter("matrix is not normalized".into()));
        }
        CoeffMatrix::with_flag(self.denormalize_values(c.values())?, c.window().copied(), false)
    }
}
