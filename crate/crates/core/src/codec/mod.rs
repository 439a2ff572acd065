//! Dense trajectories ⇄ Legendre coefficient matrices.
//!
//! A fitting window is laid out on the expert time axis as
//!
//! ```text
//! | δ pad | μ_pre overlap | T_a execution | μ_post overlap | δ pad |
//!                         ^front anchor   ^rear anchor
//! ```
//!
//! with `H_poly = δ + μ_pre + T_a + μ_post + δ` sparse nodes taken every `k`
//! expert steps. Node `i` maps to `s_i = i / (H_poly − 1)`, so the anchors sit
//! at `s_front = (δ + μ_pre)/(H_poly − 1)` and `s_rear = (δ + μ_pre + T_a)/(H_poly − 1)`.

mod anchors;
mod decode;
mod fit;
mod normalize;
mod window;

pub use anchors::{
    build_anchor_constraints, fit_chain, fit_window, kkt_correct, AnchorConstraints,
    KinematicTargets, WindowFit,
};
pub use decode::{decode, execution_grid, execution_slice, DecodedSegment, SliceDecoder};
pub use fit::{extract_sparse_nodes, fit_history, ols_fit, window_basis, HistoryFitter};
pub use normalize::{ScaleNormalizer, SCALE_FLOOR};
pub use window::FitWindowConfig;

use nalgebra::DMatrix;

use crate::error::{FlashError, Result};

/// Dense, time-indexed action samples (`T × d_a`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: DMatrix<f64>,
    frequency: f64,
    start_step: i64,
}

impl Trajectory {
    pub fn new(samples: DMatrix<f64>, frequency: f64, start_step: i64) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(FlashError::Shape("trajectory needs at least one sample and one joint".into()));
        }
        if !(frequency > 0.0 && frequency.is_finite()) {
            return Err(FlashError::Parameter(format!("frequency must be positive, got {frequency}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(FlashError::Parameter("trajectory samples must be finite".into()));
        }
        Ok(Self {
            samples,
            frequency,
            start_step,
        })
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn start_step(&self) -> i64 {
        self.start_step
    }

    /// Last covered absolute step (inclusive).
    pub fn end_step(&self) -> i64 {
        self.start_step + self.samples.nrows() as i64 - 1
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.samples.ncols()
    }

    pub fn contains(&self, step: i64) -> bool {
        step >= self.start_step && step <= self.end_step()
    }

    /// Sample at an absolute step.
    pub fn at(&self, step: i64) -> Result<Vec<f64>> {
        if !self.contains(step) {
            return Err(FlashError::InsufficientData {
                first: step,
                last: step,
                have_first: self.start_step,
                have_last: self.end_step(),
            });
        }
        let r = (step - self.start_step) as usize;
        Ok(self.samples.row(r).iter().copied().collect())
    }

    /// Extends the recording by holding its first and last samples.
    pub fn padded_hold(&self, before: usize, after: usize) -> Self {
        let n = self.len();
        let d = self.dims();
        let samples = DMatrix::from_fn(before + n + after, d, |i, j| {
            let src = i.saturating_sub(before).min(n - 1);
            self.samples[(src, j)]
        });
        Self {
            samples,
            frequency: self.frequency,
            start_step: self.start_step - before as i64,
        }
    }

    /// Finite-difference estimate of the `order`-th time derivative at `step`
    /// (physical units), central where possible. Orders 0–3 are supported.
    pub fn derivative(&self, step: i64, order: usize) -> Result<Vec<f64>> {
        let h = 1.0 / self.frequency;
        let (offsets, weights, denom): (&[i64], &[f64], f64) = match order {
            0 => (&[0], &[1.0], 1.0),
            1 => (&[-1, 1], &[-0.5, 0.5], h),
            2 => (&[-1, 0, 1], &[1.0, -2.0, 1.0], h * h),
            3 => (&[-2, -1, 1, 2], &[-0.5, 1.0, -1.0, 0.5], h * h * h),
            _ => {
                return Err(FlashError::Parameter(format!(
                    "finite-difference derivatives above order 3 are not available (asked {order})"
                )))
            }
        };
        let reach = offsets.iter().map(|o| o.abs()).max().unwrap_or(0);
        // shift the stencil inward at the recording edges
        let lo = self.start_step + reach;
        let hi = self.end_step() - reach;
        if lo > hi {
            return Err(FlashError::InsufficientData {
                first: step - reach,
                last: step + reach,
                have_first: self.start_step,
                have_last: self.end_step(),
            });
        }
        if !self.contains(step) {
            return Err(FlashError::InsufficientData {
                first: step,
                last: step,
                have_first: self.start_step,
                have_last: self.end_step(),
            });
        }
        let centre = step.clamp(lo, hi);
        let mut out = vec![0.0; self.dims()];
        for (o, w) in offsets.iter().zip(weights) {
            let r = (centre + o - self.start_step) as usize;
            for (j, acc) in out.iter_mut().enumerate() {
                *acc += w * self.samples[(r, j)];
            }
        }
        for v in &mut out {
            *v /= denom;
        }
        Ok(out)
    }
}

/// `(K + 1) × d_a` Legendre coefficients; row `j` multiplies `Φ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    values: DMatrix<f64>,
    window: Option<FitWindowConfig>,
    normalized: bool,
}

impl CoeffMatrix {
    pub fn new(values: DMatrix<f64>, window: Option<FitWindowConfig>) -> Result<Self> {
        Self::with_flag(values, window, false)
    }

    /// Wraps values that already live in scale-normalized coordinates.
    pub fn from_normalized(values: DMatrix<f64>, window: Option<FitWindowConfig>) -> Result<Self> {
        Self::with_flag(values, window, true)
    }

    pub(crate) fn with_flag(
        values: DMatrix<f64>,
        window: Option<FitWindowConfig>,
        normalized: bool,
    ) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() == 0 {
            return Err(FlashError::Shape(format!(
                "coefficient matrix must be at least 2 × 1, got {} × {}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FlashError::Parameter("coefficients must be finite".into()));
        }
        Ok(Self {
            values,
            window,
            normalized,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn window(&self) -> Option<&FitWindowConfig> {
        self.window.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn degree(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }
}
