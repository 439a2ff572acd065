use nalgebra::DMatrix;

use super::{CoeffMatrix, FitWindowConfig};
use crate::basis::{eval_basis, eval_basis_derivative};
use crate::error::{FlashError, Result};

/// Positions and analytic velocities on an `s` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSegment {
    pub s: Vec<f64>,
    /// Physical duration used for the velocity scaling.
    pub span: f64,
    /// `len(s) × d_a`.
    pub positions: DMatrix<f64>,
    /// `len(s) × d_a`, in units per second.
    pub velocities: DMatrix<f64>,
}

impl DecodedSegment {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// `â(s) = Σ ĉ_j Φ_j(s)` and `v̂(s) = (1/T) Σ ĉ_j Φ'_j(s)`.
pub fn decode(c: &CoeffMatrix, s_grid: &[f64], span: f64) -> Result<DecodedSegment> {
    if c.is_normalized() {
        return Err(FlashError::MustDenormalize);
    }
    if !(span > 0.0 && span.is_finite()) {
        return Err(FlashError::Parameter(format!("span must be positive, got {span}")));
    }
    let k = c.degree();
    let v = c.values();
    let mut basis = DMatrix::zeros(s_grid.len(), k + 1);
    let mut deriv = DMatrix::zeros(s_grid.len(), k + 1);
    for (i, &s) in s_grid.iter().enumerate() {
        for (j, x) in eval_basis(s, k)?.into_iter().enumerate() {
            basis[(i, j)] = x;
        }
        for (j, x) in eval_basis_derivative(s, k)?.into_iter().enumerate() {
            deriv[(i, j)] = x;
        }
    }
    let positions = &basis * v;
    let velocities = (&deriv * v) / span;
    Ok(DecodedSegment {
        s: s_grid.to_vec(),
        span,
        positions,
        velocities,
    })
}

/// Number of controller samples in the execution interval and their `s` values.
///
/// `s_i = s_front + (s_rear − s_front)·(i/n)` for `i < n`; the rear anchor is
/// left to the next segment.
pub fn execution_grid(cfg: &FitWindowConfig, k_eval: f64, control_hz: f64) -> Result<Vec<f64>> {
    if !(k_eval > 0.0 && k_eval.is_finite()) {
        return Err(FlashError::Parameter(format!("evaluation stride must be positive, got {k_eval}")));
    }
    if !(control_hz > 0.0 && control_hz.is_finite()) {
        return Err(FlashError::Parameter("control frequency must be positive".into()));
    }
    let (s0, s1) = (cfg.s_front(), cfg.s_rear());
    if s1 > 1.0 {
        return Err(FlashError::Domain(s1));
    }
    let n = (cfg.exec_seconds(k_eval) * control_hz).round().max(1.0) as usize;
    let width = s1 - s0;
    Ok((0..n).map(|i| s0 + width * (i as f64 / n as f64)).collect())
}

/// Decodes the execution interval at controller rate with the window played at
/// stride `k_eval`; velocities scale by `k_train / k_eval`.
pub fn execution_slice(
    c: &CoeffMatrix,
    cfg: &FitWindowConfig,
    k_eval: f64,
    control_hz: f64,
) -> Result<DecodedSegment> {
    let grid = execution_grid(cfg, k_eval, control_hz)?;
    decode(c, &grid, cfg.span_seconds(k_eval))
}

/// Precomputed basis rows for repeated execution-slice decoding, plus the
/// rear-anchor state that the next segment should continue from.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceDecoder {
    s: Vec<f64>,
    span: f64,
    basis: DMatrix<f64>,
    deriv: DMatrix<f64>,
    rear_basis: DMatrix<f64>,
    rear_deriv: DMatrix<f64>,
}

impl SliceDecoder {
    pub fn new(cfg: &FitWindowConfig, degree: usize, k_eval: f64, control_hz: f64) -> Result<Self> {
        let s = execution_grid(cfg, k_eval, control_hz)?;
        let rows = |grid: &[f64], f: fn(f64, usize) -> Result<Vec<f64>>| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(grid.len(), degree + 1);
            for (i, &x) in grid.iter().enumerate() {
                for (j, v) in f(x, degree)?.into_iter().enumerate() {
                    m[(i, j)] = v;
                }
            }
            Ok(m)
        };
        let rear = [cfg.s_rear()];
        Ok(Self {
            basis: rows(&s, eval_basis)?,
            deriv: rows(&s, eval_basis_derivative)?,
            rear_basis: rows(&rear, eval_basis)?,
            rear_deriv: rows(&rear, eval_basis_derivative)?,
            span: cfg.span_seconds(k_eval),
            s,
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    fn check(&self, c: &CoeffMatrix) -> Result<()> {
        if c.is_normalized() {
            return Err(FlashError::MustDenormalize);
        }
        if c.values().nrows() != self.basis.ncols() {
            return Err(FlashError::Shape(format!(
                "decoder built for degree {}, got {}",
                self.basis.ncols() - 1,
                c.degree()
            )));
        }
        Ok(())
    }

    /// Same values as [`execution_slice`].
    pub fn decode(&self, c: &CoeffMatrix) -> Result<DecodedSegment> {
        self.check(c)?;
        let v = c.values();
        Ok(DecodedSegment {
            s: self.s.clone(),
            span: self.span,
            positions: &self.basis * v,
            velocities: (&self.deriv * v) / self.span,
        })
    }

    /// Position and velocity at the rear anchor (`1 × d_a` each).
    pub fn rear_state(&self, c: &CoeffMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(c)?;
        let v = c.values();
        Ok((&self.rear_basis * v, (&self.rear_deriv * v) / self.span))
    }
}
