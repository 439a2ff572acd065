//! History-anchored flow matching in normalized coefficient space.
//!
//! The source `C_h` is the ridge fit of the executed history (or a standard
//! normal draw for the Gaussian prior); the path to the target `C_1` is the
//! straight line `C_τ = (1 − τ) C_h + τ C_1` with constant velocity `C_1 − C_h`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::CoeffMatrix;
use crate::error::{FlashError, Result};
use crate::model::{FieldBatch, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    History,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// History noise standard deviation `σ_h` (normalized units).
    pub sigma_h: f64,
    pub lambda_cons: f64,
    /// Euler steps at inference.
    pub n_nfe: usize,
    pub prior_mode: PriorMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_h: 0.5,
            lambda_cons: 1.0,
            n_nfe: 1,
            prior_mode: PriorMode::History,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_h >= 0.0 && self.sigma_h.is_finite()) {
            return Err(FlashError::Parameter(format!("sigma_h must be ≥ 0, got {}", self.sigma_h)));
        }
        if !(self.lambda_cons >= 0.0 && self.lambda_cons.is_finite()) {
            return Err(FlashError::Parameter(format!(
                "lambda_cons must be ≥ 0, got {}",
                self.lambda_cons
            )));
        }
        if self.n_nfe == 0 {
            return Err(FlashError::Parameter("n_nfe must be at least 1".into()));
        }
        Ok(())
    }
}

/// One training tuple `(C_h, C_1, τ, e)`; `c_h` is the (possibly noised) source.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub c_h: CoeffMatrix,
    pub c_1: CoeffMatrix,
    pub tau: f64,
    pub e: Vec<f64>,
}

impl FlowSample {
    pub fn new(c_h: CoeffMatrix, c_1: CoeffMatrix, tau: f64, e: Vec<f64>) -> Result<Self> {
        check_pair(&c_h, &c_1)?;
        check_tau(tau)?;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(FlashError::Parameter("conditioning must be finite".into()));
        }
        Ok(Self { c_h, c_1, tau, e })
    }
}

/// A clean `(C_h, C_1, e)` training pair before noise and flow time are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPair {
    pub c_h: CoeffMatrix,
    pub c_1: CoeffMatrix,
    pub e: Vec<f64>,
}

fn check_pair(a: &CoeffMatrix, b: &CoeffMatrix) -> Result<()> {
    if a.values().shape() != b.values().shape() {
        return Err(FlashError::Shape(format!(
            "source {:?} and target {:?} differ",
            a.values().shape(),
            b.values().shape()
        )));
    }
    if a.is_normalized() != b.is_normalized() {
        return Err(FlashError::Parameter("source and target must share normalization".into()));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(FlashError::Parameter(format!("flow time {tau} outside [0, 1]")));
    }
    Ok(())
}

fn rewrap(values: DMatrix<f64>, like: &CoeffMatrix) -> Result<CoeffMatrix> {
    if like.is_normalized() {
        CoeffMatrix::from_normalized(values, like.window().copied())
    } else {
        CoeffMatrix::new(values, like.window().copied())
    }
}

/// `(C_τ, v*)` with `C_τ = (1 − τ) C_h + τ C_1` and `v* = C_1 − C_h`.
pub fn interpolate(c_h: &CoeffMatrix, c_1: &CoeffMatrix, tau: f64) -> Result<(CoeffMatrix, CoeffMatrix)> {
    check_pair(c_h, c_1)?;
    check_tau(tau)?;
    let c_tau = c_h.values() * (1.0 - tau) + c_1.values() * tau;
    let v = c_1.values() - c_h.values();
    Ok((rewrap(c_tau, c_h)?, rewrap(v, c_h)?))
}

/// `C_h + ε` with `ε ~ N(0, σ_h² I)`.
pub fn inject_history_noise<R: Rng + ?Sized>(c_h: &CoeffMatrix, sigma_h: f64, rng: &mut R) -> Result<CoeffMatrix> {
    if !(sigma_h >= 0.0 && sigma_h.is_finite()) {
        return Err(FlashError::Parameter(format!("sigma_h must be ≥ 0, got {sigma_h}")));
    }
    if sigma_h == 0.0 {
        return Ok(c_h.clone());
    }
    let v = c_h.values();
    let noised = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        v[(i, j)] + sigma_h * z
    });
    rewrap(noised, c_h)
}

/// A standard-normal coefficient draw in normalized coordinates.
pub fn gaussian_source<R: Rng + ?Sized>(rows: usize, dims: usize, rng: &mut R) -> Result<CoeffMatrix> {
    let z = DMatrix::from_fn(rows, dims, |_, _| rng.sample::<f64, _>(StandardNormal));
    CoeffMatrix::from_normalized(z, None)
}

/// Training source for a clean history fit under the given prior.
pub fn training_source<R: Rng + ?Sized>(c_h: &CoeffMatrix, cfg: &FlowConfig, rng: &mut R) -> Result<CoeffMatrix> {
    match cfg.prior_mode {
        PriorMode::History => inject_history_noise(c_h, cfg.sigma_h, rng),
        PriorMode::Gaussian => gaussian_source(c_h.values().nrows(), c_h.dims(), rng),
    }
}

/// Inference start: the clean history fit, or a fresh Gaussian draw.
pub fn inference_source<R: Rng + ?Sized>(c_h: &CoeffMatrix, mode: PriorMode, rng: &mut R) -> Result<CoeffMatrix> {
    match mode {
        PriorMode::History => Ok(c_h.clone()),
        PriorMode::Gaussian => gaussian_source(c_h.values().nrows(), c_h.dims(), rng),
    }
}

/// Draws `τ ~ U[0, 1]` and the prior source for each selected pair.
pub fn prepare_batch<R: Rng + ?Sized>(
    pairs: &[FlowPair],
    indices: &[usize],
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<Vec<FlowSample>> {
    indices
        .iter()
        .map(|&i| {
            let pair = pairs
                .get(i)
                .ok_or_else(|| FlashError::Parameter(format!("pair index {i} out of range")))?;
            let tau: f64 = rng.random_range(0.0..=1.0);
            let source = training_source(&pair.c_h, cfg, rng)?;
            FlowSample::new(source, pair.c_1.clone(), tau, pair.e.clone())
        })
        .collect()
}

/// A scalar loss and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `L_FM + λ_cons L_cons` together with both parts.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub fm: f64,
    pub cons: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// Pairwise summation, so reordering a batch perturbs the sum only at
/// rounding level.
fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

#[derive(Clone, Copy)]
enum Path {
    /// `C_τ` at each sample's own τ.
    Interpolant,
    /// `C_h` at τ = 0.
    Source,
}

fn assemble<M: VelocityField>(model: &M, samples: &[FlowSample], paths: &[Path]) -> Result<(FieldBatch, DMatrix<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| FlashError::Parameter("empty flow batch".into()))?;
    let n = first.c_h.values().len();
    if n != model.coeff_len() {
        return Err(FlashError::Shape(format!(
            "model predicts {} coefficients, samples carry {n}",
            model.coeff_len()
        )));
    }
    let cols = samples.len() * paths.len();
    let mut x = DMatrix::zeros(n, cols);
    let mut tau = Vec::with_capacity(cols);
    let mut cond = DMatrix::zeros(model.cond_len(), cols);
    let mut target = DMatrix::zeros(n, cols);
    let mut col = 0;
    for path in paths {
        for s in samples {
            if s.c_h.values().len() != n || s.e.len() != model.cond_len() {
                return Err(FlashError::Shape("flow batch mixes shapes".into()));
            }
            let (h, one) = (s.c_h.values().as_slice(), s.c_1.values().as_slice());
            let t = match path {
                Path::Interpolant => s.tau,
                Path::Source => 0.0,
            };
            for i in 0..n {
                x[(i, col)] = (1.0 - t) * h[i] + t * one[i];
                target[(i, col)] = one[i] - h[i];
            }
            tau.push(t);
            cond.column_mut(col).copy_from_slice(&s.e);
            col += 1;
        }
    }
    Ok((FieldBatch { x, tau, cond }, target))
}

/// Per-column squared residuals `‖f − v*‖²`, checked for finiteness.
fn residuals(out: &DMatrix<f64>, target: &DMatrix<f64>, batch: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let r = out - target;
    let mut per = Vec::with_capacity(r.ncols());
    for (j, col) in r.column_iter().enumerate() {
        let v = col.norm_squared();
        if !v.is_finite() {
            return Err(FlashError::TrainingDivergence {
                index: j % batch,
                what: "non-finite model output".into(),
            });
        }
        per.push(v);
    }
    Ok((r, per))
}

fn single_term<M: VelocityField>(model: &M, samples: &[FlowSample], path: Path) -> Result<LossEval> {
    let (batch, target) = assemble(model, samples, &[path])?;
    let (out, tape) = model.forward(&batch)?;
    let b = samples.len();
    let (r, per) = residuals(&out, &target, b)?;
    let upstream = r * (2.0 / b as f64);
    Ok(LossEval {
        loss: pairwise_sum(&per) / b as f64,
        grad: model.backward(&tape, &upstream),
    })
}

/// `mean_b ‖f_θ(C_τ, τ, e) − (C_1 − C_h)‖²`.
pub fn fm_loss<M: VelocityField>(model: &M, samples: &[FlowSample]) -> Result<LossEval> {
    single_term(model, samples, Path::Interpolant)
}

/// `mean_b ‖C_h + f_θ(C_h, 0, e) − C_1‖²`.
pub fn consistency_loss<M: VelocityField>(model: &M, samples: &[FlowSample]) -> Result<LossEval> {
    single_term(model, samples, Path::Source)
}

/// Both terms through one stacked forward/backward pass.
pub fn total_loss<M: VelocityField>(model: &M, samples: &[FlowSample], lambda_cons: f64) -> Result<TotalLoss> {
    if !(lambda_cons >= 0.0 && lambda_cons.is_finite()) {
        return Err(FlashError::Parameter(format!("lambda_cons must be ≥ 0, got {lambda_cons}")));
    }
    let (batch, target) = assemble(model, samples, &[Path::Interpolant, Path::Source])?;
    let (out, tape) = model.forward(&batch)?;
    let b = samples.len();
    let (mut r, per) = residuals(&out, &target, b)?;
    let fm = pairwise_sum(&per[..b]) / b as f64;
    let cons = pairwise_sum(&per[b..]) / b as f64;
    r.columns_mut(0, b).scale_mut(2.0 / b as f64);
    r.columns_mut(b, b).scale_mut(2.0 * lambda_cons / b as f64);
    Ok(TotalLoss {
        fm,
        cons,
        total: fm + lambda_cons * cons,
        grad: model.backward(&tape, &r),
    })
}

/// `n_nfe` Euler steps of size `1/n_nfe`, the model conditioned on the current τ.
pub fn euler_infer<M: VelocityField>(model: &M, start: &CoeffMatrix, e: &[f64], n_nfe: usize) -> Result<CoeffMatrix> {
    let cond = DMatrix::from_column_slice(e.len(), 1, e);
    let x = DMatrix::from_column_slice(start.values().len(), 1, start.values().as_slice());
    let out = euler_infer_batch(model, &x, &cond, n_nfe)?;
    let (rows, dims) = start.values().shape();
    rewrap(DMatrix::from_column_slice(rows, dims, out.as_slice()), start)
}

/// Batched Euler integration; columns of `start` are `vec(C)`.
pub fn euler_infer_batch<M: VelocityField>(
    model: &M,
    start: &DMatrix<f64>,
    cond: &DMatrix<f64>,
    n_nfe: usize,
) -> Result<DMatrix<f64>> {
    if n_nfe == 0 {
        return Err(FlashError::Parameter("n_nfe must be at least 1".into()));
    }
    if start.ncols() != cond.ncols() {
        return Err(FlashError::Shape("start and conditioning batch sizes differ".into()));
    }
    let h = 1.0 / n_nfe as f64;
    let mut batch = FieldBatch {
        x: start.clone(),
        tau: vec![0.0; start.ncols()],
        cond: cond.clone(),
    };
    for step in 0..n_nfe {
        let tau = step as f64 * h;
        batch.tau.iter_mut().for_each(|t| *t = tau);
        let v = model.predict(&batch)?;
        if n_nfe == 1 {
            batch.x += v;
        } else {
            batch.x += v * h;
        }
        if batch.x.iter().any(|x| !x.is_finite()) {
            return Err(FlashError::InferenceDivergence { step });
        }
    }
    Ok(batch.x)
}
