use nalgebra::DMatrix;

use super::{CoeffMatrix, FitWindowConfig, Trajectory};
use crate::basis::{basis_matrix, uniform_nodes, BasisMatrix, MatrixUse};
use crate::error::{FlashError, Result};
use crate::linalg::SpdFactor;

/// Sparse nodes `Q` (`H_poly × d_a`) for the window whose front anchor is `t + 1`.
///
/// The returned trajectory is sampled at `f_expert / k` and its `start_step`
/// is the expert step of the first node.
pub fn extract_sparse_nodes(expert: &Trajectory, cfg: &FitWindowConfig, t: i64) -> Result<Trajectory> {
    let steps = cfg.node_steps(t);
    let (first, last) = (steps[0], *steps.last().unwrap());
    if !expert.contains(first) || !expert.contains(last) {
        return Err(FlashError::InsufficientData {
            first,
            last,
            have_first: expert.start_step(),
            have_last: expert.end_step(),
        });
    }
    let base = expert.start_step();
    let src = expert.samples();
    let q = DMatrix::from_fn(steps.len(), expert.dims(), |i, j| src[((steps[i] - base) as usize, j)]);
    Trajectory::new(q, expert.frequency() / cfg.stride as f64, first)
}

/// Basis matrix on the window's uniform node grid.
pub fn window_basis(cfg: &FitWindowConfig, degree: usize) -> Result<BasisMatrix> {
    basis_matrix(&uniform_nodes(cfg.h_poly()), degree, MatrixUse::Fitting)
}

/// `C* = (SᵀS)⁻¹ SᵀQ` through a Cholesky factor of the Gram matrix.
pub fn ols_fit(q: &DMatrix<f64>, s: &BasisMatrix) -> Result<CoeffMatrix> {
    let sv = s.values();
    if q.nrows() != sv.nrows() {
        return Err(FlashError::Shape(format!(
            "{} target rows against {} basis rows",
            q.nrows(),
            sv.nrows()
        )));
    }
    if sv.nrows() < sv.ncols() {
        return Err(FlashError::Underdetermined {
            nodes: sv.nrows(),
            coeffs: sv.ncols(),
        });
    }
    let gram = sv.transpose() * sv;
    let factor = SpdFactor::new(&gram)?;
    let c = factor.solve(&(sv.transpose() * q));
    CoeffMatrix::new(c, None)
}

/// Ridge fit of the recent history on its own uniform `[0, 1]` grid:
/// `C_h = (S_hᵀS_h + λ_h I)⁻¹ S_hᵀ a_{≤t}`.
pub fn fit_history(history: &DMatrix<f64>, degree: usize, lambda: f64) -> Result<CoeffMatrix> {
    HistoryFitter::new(history.nrows(), degree, lambda)?.fit(history)
}

/// The ridge projector `(S_hᵀS_h + λ_h I)⁻¹ S_hᵀ` for a fixed history length.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryFitter {
    projector: DMatrix<f64>,
    lambda: f64,
}

impl HistoryFitter {
    pub fn new(len: usize, degree: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(FlashError::Parameter(format!(
                "history ridge weight must be strictly positive, got {lambda}"
            )));
        }
        if len < 2 {
            return Err(FlashError::Parameter(format!("history needs at least 2 samples, got {len}")));
        }
        let s = basis_matrix(&uniform_nodes(len), degree, MatrixUse::Evaluation)?;
        let sv = s.values();
        let mut gram = sv.transpose() * sv;
        for i in 0..gram.nrows() {
            gram[(i, i)] += lambda;
        }
        let factor = SpdFactor::new(&gram)?;
        Ok(Self {
            projector: factor.solve(&sv.transpose()),
            lambda,
        })
    }

    pub fn len(&self) -> usize {
        self.projector.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.projector.ncols() == 0
    }

    pub fn degree(&self) -> usize {
        self.projector.nrows() - 1
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `history` is `T_o × d_a`, oldest sample first.
    pub fn fit(&self, history: &DMatrix<f64>) -> Result<CoeffMatrix> {
        if history.nrows() != self.len() {
            return Err(FlashError::Shape(format!(
                "fitter expects {} history samples, got {}",
                self.len(),
                history.nrows()
            )));
        }
        CoeffMatrix::new(&self.projector * history, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize, d: usize) -> Trajectory {
        Trajectory::new(DMatrix::from_fn(n, d, |i, j| i as f64 + 100.0 * j as f64), 50.0, 0).unwrap()
    }

    #[test]
    fn stride_one_is_plain_chunk() {
        let cfg = FitWindowConfig {
            exec_steps: 8,
            overlap_pre: 0,
            overlap_post: 0,
            padding: 0,
            stride: 1,
            ..Default::default()
        };
        let expert = ramp(40, 2);
        let q = extract_sparse_nodes(&expert, &cfg, 9).unwrap();
        assert_eq!(q.len(), 8);
        for i in 0..8 {
            assert_eq!(q.samples()[(i, 0)], (10 + i) as f64);
            assert_eq!(q.samples()[(i, 1)], (110 + i) as f64);
        }
    }

    #[test]
    fn stride_four_covers_four_horizons() {
        let cfg = FitWindowConfig {
            exec_steps: 16,
            overlap_pre: 0,
            overlap_post: 0,
            padding: 0,
            stride: 4,
            ..Default::default()
        };
        let expert = ramp(100, 1);
        let q = extract_sparse_nodes(&expert, &cfg, -1).unwrap();
        assert_eq!(q.len(), 16);
        assert_eq!(q.samples()[(0, 0)], 0.0);
        assert_eq!(q.samples()[(15, 0)], 60.0);
        assert!((q.frequency() - 12.5).abs() < 1e-12);
        assert!((cfg.span_seconds(4.0) - 60.0 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn window_past_recording_fails() {
        let cfg = FitWindowConfig::default();
        let expert = ramp(30, 1);
        assert!(matches!(
            extract_sparse_nodes(&expert, &cfg, 20),
            Err(FlashError::InsufficientData { .. })
        ));
        assert!(matches!(
            extract_sparse_nodes(&expert, &cfg, 0),
            Err(FlashError::InsufficientData { .. })
        ));
    }

    #[test]
    fn exact_recovery_of_in_span_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = FitWindowConfig::default();
        let s = window_basis(&cfg, 6).unwrap();
        let c0 = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-2.0..2.0));
        let q = s.values() * &c0;
        let c = ols_fit(&q, &s).unwrap();
        assert!((c.values() - &c0).amax() < 1e-9);
    }

    #[test]
    fn zero_targets_give_zero_coefficients() {
        let s = window_basis(&FitWindowConfig::default(), 6).unwrap();
        let c = ols_fit(&DMatrix::zeros(14, 2), &s).unwrap();
        assert_eq!(c.values().amax(), 0.0);
    }

    #[test]
    fn residual_matches_independent_least_squares() {
        // degree-8 data projected onto degree 6; oracle uses an SVD solve of S C = Q
        let nodes = uniform_nodes(14);
        let s = basis_matrix(&nodes, 6, MatrixUse::Fitting).unwrap();
        let q = DMatrix::from_fn(14, 2, |i, j| {
            let x = nodes[i];
            (1.0 + j as f64) * x.powi(8) - 3.0 * x.powi(5) + 0.5 * x
        });
        let c = ols_fit(&q, &s).unwrap();
        let ours = (s.values() * c.values() - &q).norm();
        let svd = s.values().clone().svd(true, true);
        let oracle = svd.solve(&q, 1e-14).unwrap();
        let theirs = (s.values() * &oracle - &q).norm();
        assert!((ours - theirs).abs() < 1e-8, "{ours} vs {theirs}");
        assert!(ours > 1e-6);
    }

    #[test]
    fn mismatched_rows_rejected() {
        let s = window_basis(&FitWindowConfig::default(), 6).unwrap();
        assert!(matches!(ols_fit(&DMatrix::zeros(13, 1), &s), Err(FlashError::Shape(_))));
    }

    #[test]
    fn constant_history_ridge() {
        // closed-form oracle: (SᵀS + λI)⁻¹ Sᵀ 1 c solved densely via LU
        let c = 0.8;
        for n in [2, 8, 12] {
            let hist = DMatrix::from_element(n, 1, c);
            let ch = fit_history(&hist, 6, 0.1).unwrap();
            let s = basis_matrix(&uniform_nodes(n), 6, MatrixUse::Evaluation).unwrap();
            let sv = s.values();
            let mut g = sv.transpose() * sv;
            for i in 0..7 {
                g[(i, i)] += 0.1;
            }
            let oracle = g.lu().solve(&(sv.transpose() * &hist)).unwrap();
            assert!((ch.values() - &oracle).amax() < 1e-12);
            assert!(ch.values()[(0, 0)] < c && ch.values()[(0, 0)] > 0.0);
            let decoded = sv * ch.values();
            for v in decoded.iter() {
                assert!((v - c).abs() / c < 0.02, "n = {n}: {v}");
            }
        }
    }

    #[test]
    fn ridge_limit_matches_ols() {
        let nodes = uniform_nodes(30);
        let s = basis_matrix(&nodes, 6, MatrixUse::Fitting).unwrap();
        let hist = DMatrix::from_fn(30, 2, |i, j| (nodes[i] * (3.0 + j as f64)).sin());
        let ridge = fit_history(&hist, 6, 1e-12).unwrap();
        let ols = ols_fit(&hist, &s).unwrap();
        assert!((ridge.values() - ols.values()).amax() < 1e-6);
    }

    #[test]
    fn two_sample_history_is_bounded() {
        let hist = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.5, -1.0]);
        let lambda = 0.1;
        let ch = fit_history(&hist, 6, lambda).unwrap();
        let bound = hist.norm() * (hist.nrows() as f64).sqrt() / lambda;
        assert!(ch.values().norm() <= bound);
    }

    #[test]
    fn ridge_weight_must_be_positive() {
        let hist = DMatrix::from_element(4, 1, 1.0);
        assert!(matches!(fit_history(&hist, 6, 0.0), Err(FlashError::Parameter(_))));
        assert!(fit_history(&hist, 6, -1.0).is_err());
        assert!(fit_history(&DMatrix::from_element(1, 1, 1.0), 6, 0.1).is_err());
    }

    #[test]
    fn ridge_norm_non_increasing_in_lambda() {
        let hist = DMatrix::from_fn(5, 2, |i, j| (i as f64 * 0.7 + j as f64).cos());
        let mut prev = f64::INFINITY;
        for e in -3..=1 {
            for m in [1.0, 2.0, 5.0] {
                let lambda = m * 10f64.powi(e);
                let n = fit_history(&hist, 6, lambda).unwrap().values().norm();
                assert!(n <= prev + 1e-12);
                prev = n;
            }
        }
    }
}
