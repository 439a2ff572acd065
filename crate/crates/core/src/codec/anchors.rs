//! Exact kinematic anchors and the closed-form KKT projection.

use nalgebra::DMatrix;

use super::fit::{extract_sparse_nodes, ols_fit, window_basis};
use super::{CoeffMatrix, FitWindowConfig, Trajectory};
use crate::basis::{eval_basis_nth_derivative, BasisMatrix};
use crate::error::{FlashError, Result};
use crate::linalg::SpdFactor;

/// Equality constraints `A C = b` at the front and rear anchors.
///
/// Rows are ordered front anchor (orders `0..=r`) then rear anchor (orders `0..=r`).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConstraints {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    positions: [f64; 2],
    order: usize,
}

impl AnchorConstraints {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, positions: [f64; 2], order: usize) -> Result<Self> {
        let rows = 2 * (order + 1);
        if a.nrows() != rows || b.nrows() != rows {
            return Err(FlashError::Shape(format!(
                "order {order} needs {rows} constraint rows, got A {} and b {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if rows > a.ncols() {
            return Err(FlashError::InfeasibleConstraint {
                order,
                degree: a.ncols() - 1,
                rows,
                coeffs: a.ncols(),
            });
        }
        let sv = a.clone().singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if !(lo > hi * 1e-10) {
            return Err(FlashError::DegenerateAnchor(format!(
                "constraint matrix is rank deficient (σ_min/σ_max = {:e})",
                lo / hi
            )));
        }
        Ok(Self { a, b, positions, order })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `[s_front, s_rear]`.
    pub fn positions(&self) -> [f64; 2] {
        self.positions
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

/// Physical kinematic state at an anchor: `derivatives[m]` is the `m`-th time
/// derivative (`m = 0` is position).
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTargets {
    pub derivatives: Vec<Vec<f64>>,
}

impl KinematicTargets {
    pub fn from_expert(expert: &Trajectory, step: i64, order: usize) -> Result<Self> {
        let derivatives = (0..=order)
            .map(|m| expert.derivative(step, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { derivatives })
    }

    /// Evaluates a decoded polynomial's state at `s` (window span `span` seconds).
    pub fn from_polynomial(c: &CoeffMatrix, s: f64, span: f64, order: usize) -> Result<Self> {
        let derivatives = (0..=order)
            .map(|m| {
                let row = eval_basis_nth_derivative(s, c.degree(), m)?;
                let scale = span.powi(m as i32);
                Ok((0..c.dims())
                    .map(|j| {
                        row.iter()
                            .enumerate()
                            .map(|(i, phi)| phi * c.values()[(i, j)])
                            .sum::<f64>()
                            / scale
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { derivatives })
    }
}

/// Anchors for the window whose front anchor is expert step `t + 1` and rear
/// anchor `t + 1 + k·T_a`.
///
/// Targets default to expert finite differences; `front_override` replaces the
/// front anchor's targets, e.g. with the previous segment's analytic state.
/// Derivative targets are expressed on the normalized axis (`× T^m`).
pub fn build_anchor_constraints(
    expert: &Trajectory,
    cfg: &FitWindowConfig,
    degree: usize,
    t: i64,
    front_override: Option<&KinematicTargets>,
) -> Result<AnchorConstraints> {
    let order = cfg.continuity_order;
    cfg.check_continuity(degree)?;
    let (s_front, s_rear) = (cfg.s_front(), cfg.s_rear());
    if s_rear > 1.0 {
        return Err(FlashError::Parameter(format!(
            "rear anchor at s = {s_rear} lies outside the window; add overlap or padding"
        )));
    }
    let front_step = t + 1;
    let rear_step = front_step + cfg.steps_per_call() as i64;
    let span = cfg.span_seconds(cfg.stride as f64);

    let front = match front_override {
        Some(k) => {
            if k.derivatives.len() < order + 1 {
                return Err(FlashError::Shape(format!(
                    "front targets carry {} orders, need {}",
                    k.derivatives.len(),
                    order + 1
                )));
            }
            k.clone()
        }
        None => KinematicTargets::from_expert(expert, front_step, order)?,
    };
    let rear = KinematicTargets::from_expert(expert, rear_step, order)?;

    let rows = cfg.constraint_rows();
    let d = expert.dims();
    let mut a = DMatrix::zeros(rows, degree + 1);
    let mut b = DMatrix::zeros(rows, d);
    for (block, (s, targets)) in [(s_front, &front), (s_rear, &rear)].into_iter().enumerate() {
        for m in 0..=order {
            let r = block * (order + 1) + m;
            let phi = eval_basis_nth_derivative(s, degree, m)?;
            for (j, v) in phi.into_iter().enumerate() {
                a[(r, j)] = v;
            }
            let scale = span.powi(m as i32);
            if targets.derivatives[m].len() != d {
                return Err(FlashError::Shape("anchor target width differs from expert".into()));
            }
            for j in 0..d {
                b[(r, j)] = targets.derivatives[m][j] * scale;
            }
        }
    }
    AnchorConstraints::new(a, b, [s_front, s_rear], order)
}

/// `C*_c = C* − G⁻¹Aᵀ (A G⁻¹ Aᵀ)⁻¹ (A C* − b)` with `G = SᵀS`.
pub fn kkt_correct(c_star: &CoeffMatrix, s: &BasisMatrix, ac: &AnchorConstraints) -> Result<CoeffMatrix> {
    let sv = s.values();
    let c = c_star.values();
    if ac.a().ncols() != c.nrows() || sv.ncols() != c.nrows() || ac.b().ncols() != c.ncols() {
        return Err(FlashError::Shape("KKT operands disagree on degree or width".into()));
    }
    let gram = SpdFactor::new(&(sv.transpose() * sv))?;
    let g_inv_at = gram.solve(&ac.a().transpose());
    let schur = ac.a() * &g_inv_at;
    let schur = SpdFactor::new(&schur).map_err(|e| match e {
        FlashError::SingularFit { condition } => FlashError::DegenerateAnchor(format!(
            "A (SᵀS)⁻¹ Aᵀ is singular (condition {condition:e})"
        )),
        other => other,
    })?;
    let violation = ac.a() * c - ac.b();
    let corrected = c - g_inv_at * schur.solve(&violation);
    CoeffMatrix::new(corrected, c_star.window().copied())
}

/// Both the raw least-squares fit and its continuity-corrected form.
#[derive(Debug, Clone)]
pub struct WindowFit {
    pub raw: CoeffMatrix,
    pub corrected: Option<CoeffMatrix>,
    pub anchors: Option<AnchorConstraints>,
}

impl WindowFit {
    /// The training target: corrected when anchors were applied.
    pub fn target(&self) -> &CoeffMatrix {
        self.corrected.as_ref().unwrap_or(&self.raw)
    }
}

/// Fits the window for current step `t`, applying the anchor correction when `kkt` is set.
pub fn fit_window(
    expert: &Trajectory,
    cfg: &FitWindowConfig,
    degree: usize,
    t: i64,
    kkt: bool,
    front_override: Option<&KinematicTargets>,
) -> Result<WindowFit> {
    cfg.validate(degree)?;
    let q = extract_sparse_nodes(expert, cfg, t)?;
    let s = window_basis(cfg, degree)?;
    let raw = CoeffMatrix::new(ols_fit(q.samples(), &s)?.into_values(), Some(*cfg))?;
    if !kkt {
        return Ok(WindowFit {
            raw,
            corrected: None,
            anchors: None,
        });
    }
    let ac = build_anchor_constraints(expert, cfg, degree, t, front_override)?;
    let corrected = kkt_correct(&raw, &s, &ac)?;
    Ok(WindowFit {
        raw,
        corrected: Some(corrected),
        anchors: Some(ac),
    })
}

/// Consecutive corrected segments starting at current step `t0`; each front
/// anchor takes the previous segment's analytic state at its rear anchor.
pub fn fit_chain(
    expert: &Trajectory,
    cfg: &FitWindowConfig,
    degree: usize,
    t0: i64,
    segments: usize,
) -> Result<Vec<CoeffMatrix>> {
    let span = cfg.span_seconds(cfg.stride as f64);
    let mut out: Vec<CoeffMatrix> = Vec::with_capacity(segments);
    for n in 0..segments {
        let t = t0 + (n * cfg.steps_per_call()) as i64;
        let front = match out.last() {
            Some(prev) => Some(KinematicTargets::from_polynomial(
                prev,
                cfg.s_rear(),
                span,
                cfg.continuity_order,
            )?),
            None => None,
        };
        let fit = fit_window(expert, cfg, degree, t, true, front.as_ref())?;
        out.push(fit.corrected.expect("kkt requested"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{basis_matrix, uniform_nodes, MatrixUse};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wavy_expert(n: usize, d: usize, f: f64) -> Trajectory {
        Trajectory::new(
            DMatrix::from_fn(n, d, |i, j| {
                let t = i as f64 / f;
                (1.3 * t + j as f64).sin() + 0.2 * (3.1 * t).cos()
            }),
            f,
            0,
        )
        .unwrap()
    }

    #[test]
    fn position_only_anchors() {
        let cfg = FitWindowConfig {
            continuity_order: 0,
            ..Default::default()
        };
        let expert = wavy_expert(200, 2, 50.0);
        let ac = build_anchor_constraints(&expert, &cfg, 6, 20, None).unwrap();
        assert_eq!(ac.a().shape(), (2, 7));
        assert_eq!(ac.a().row(0).iter().copied().collect::<Vec<_>>(), crate::basis::eval_basis(cfg.s_front(), 6).unwrap());
        assert_eq!(ac.b().row(0).iter().copied().collect::<Vec<_>>(), expert.at(21).unwrap());
        assert_eq!(ac.b().row(1).iter().copied().collect::<Vec<_>>(), expert.at(21 + 32).unwrap());
    }

    #[test]
    fn c1_anchor_layout() {
        let cfg = FitWindowConfig::default();
        let expert = wavy_expert(200, 2, 50.0);
        let ac = build_anchor_constraints(&expert, &cfg, 6, 20, None).unwrap();
        assert_eq!(ac.a().shape(), (4, 7));
        assert_eq!(ac.b().shape(), (4, 2));
        let d = crate::basis::eval_basis_derivative(cfg.s_front(), 6).unwrap();
        assert_eq!(ac.a().row(1).iter().copied().collect::<Vec<_>>(), d);
        let v = expert.derivative(21, 1).unwrap();
        let span = cfg.span_seconds(4.0);
        assert!((ac.b()[(1, 0)] - v[0] * span).abs() < 1e-12);
    }

    #[test]
    fn infeasible_order() {
        let cfg = FitWindowConfig {
            continuity_order: 6,
            ..Default::default()
        };
        let expert = wavy_expert(200, 1, 50.0);
        assert!(matches!(
            build_anchor_constraints(&expert, &cfg, 6, 20, None),
            Err(FlashError::InfeasibleConstraint { .. })
        ));
    }

    #[test]
    fn coincident_anchors_are_degenerate() {
        let row = DMatrix::from_row_slice(1, 4, &[1.0, 0.5, 0.2, 0.1]);
        let a = DMatrix::from_fn(2, 4, |_, j| row[(0, j)]);
        assert!(matches!(
            AnchorConstraints::new(a, DMatrix::zeros(2, 1), [0.3, 0.3], 0),
            Err(FlashError::DegenerateAnchor(_))
        ));
    }

    #[test]
    fn satisfied_constraints_leave_fit_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = basis_matrix(&uniform_nodes(14), 6, MatrixUse::Fitting).unwrap();
        let c = CoeffMatrix::new(DMatrix::from_fn(7, 2, |_, _| rng.random_range(-1.0..1.0)), None).unwrap();
        let a = DMatrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
        let b = &a * c.values();
        let ac = AnchorConstraints::new(a, b, [0.2, 0.8], 1).unwrap();
        let out = kkt_correct(&c, &s, &ac).unwrap();
        assert!((out.values() - c.values()).amax() < 1e-12);
    }

    #[test]
    fn correction_hits_targets_and_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = basis_matrix(&uniform_nodes(14), 6, MatrixUse::Fitting).unwrap();
        let q = DMatrix::from_fn(14, 2, |_, _| rng.random_range(-1.0..1.0));
        let c_star = ols_fit(&q, &s).unwrap();
        let a = DMatrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let ac = AnchorConstraints::new(a.clone(), b.clone(), [0.2, 0.8], 1).unwrap();
        let cc = kkt_correct(&c_star, &s, &ac).unwrap();
        assert!((&a * cc.values() - &b).amax() < 1e-9);

        // null-space perturbation oracle
        let eig = (a.transpose() * &a).symmetric_eigen();
        let mut order: Vec<usize> = (0..7).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
        let null = DMatrix::from_fn(7, 3, |r, c| eig.eigenvectors[(r, order[c])]);
        let best = (s.values() * cc.values() - &q).norm();
        for _ in 0..1000 {
            let z = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-0.5..0.5));
            let trial = cc.values() + &null * z;
            assert!((&a * &trial - &b).amax() < 1e-9);
            assert!((s.values() * trial - &q).norm() >= best - 1e-10);
        }
    }

    #[test]
    fn chain_is_c1_at_junctions() {
        let cfg = FitWindowConfig::default();
        let expert = wavy_expert(600, 2, 50.0);
        let segs = fit_chain(&expert, &cfg, 6, 20, 5).unwrap();
        let span = cfg.span_seconds(4.0);
        for w in segs.windows(2) {
            let end = KinematicTargets::from_polynomial(&w[0], cfg.s_rear(), span, 1).unwrap();
            let start = KinematicTargets::from_polynomial(&w[1], cfg.s_front(), span, 1).unwrap();
            for j in 0..2 {
                assert!((end.derivatives[0][j] - start.derivatives[0][j]).abs() < 1e-8);
                assert!((end.derivatives[1][j] - start.derivatives[1][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rear_anchor_outside_window_rejected() {
        let cfg = FitWindowConfig {
            overlap_pre: 0,
            overlap_post: 0,
            padding: 0,
            continuity_order: 0,
            ..Default::default()
        };
        let expert = wavy_expert(200, 1, 50.0);
        assert!(build_anchor_constraints(&expert, &cfg, 6, 10, None).is_err());
    }
}
