//! Minibatch Adam on `L_FM + λ_cons L_cons` and held-out one-step evaluation.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_matrix, MatrixUse};
use crate::codec::{FitWindowConfig, ScaleNormalizer};
use crate::error::{FlashError, Result};
use crate::flow::{euler_infer_batch, inference_source, prepare_batch, total_loss, FlowConfig, FlowPair, PriorMode};
use crate::model::{clip_gradient, AdamConfig, AdamState, Mlp, VelocityField};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Loss rows are emitted every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(FlashError::Config("batch_size and log_every must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// One NDJSON row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub fm_loss: f64,
    pub cons_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Model, optimizer state and step counter; everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Mlp,
    pub adam: AdamState,
    pub step: usize,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Mlp, seed: u64) -> Self {
        let adam = AdamState::new(model.params().len());
        Self {
            model,
            adam,
            step: 0,
            seed,
        }
    }

    /// Draws the batch for step `self.step` from its own stream, so a resumed
    /// run sees exactly the batches an uninterrupted one would.
    pub fn train_step(&mut self, pairs: &[FlowPair], flow: &FlowConfig, cfg: &TrainConfig) -> Result<LossRecord> {
        if pairs.is_empty() {
            return Err(FlashError::Parameter("no training pairs".into()));
        }
        let started = Instant::now();
        let mut rng = stream(self.seed, Domain::TrainStep, self.step as u64);
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pairs.len())).collect();
        let batch = prepare_batch(pairs, &indices, flow, &mut rng)?;
        let mut loss = total_loss(&self.model, &batch, flow.lambda_cons)?;
        if !loss.total.is_finite() {
            return Err(FlashError::TrainingDivergence {
                index: self.step,
                what: "loss".into(),
            });
        }
        let grad_norm = clip_gradient(&mut loss.grad, cfg.optimizer.clip_norm);
        if !grad_norm.is_finite() {
            return Err(FlashError::TrainingDivergence {
                index: self.step,
                what: "gradient".into(),
            });
        }
        self.adam
            .update(self.model.params_mut(), &loss.grad, &cfg.optimizer)
            .map_err(|_| FlashError::TrainingDivergence {
                index: self.step,
                what: "parameters".into(),
            })?;
        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            fm_loss: loss.fm,
            cons_loss: loss.cons,
            total: loss.total,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until `cfg.steps` total steps. `on_log` sees every logged row,
    /// `on_checkpoint` the trainer at each checkpoint boundary.
    pub fn run(
        &mut self,
        pairs: &[FlowPair],
        flow: &FlowConfig,
        cfg: &TrainConfig,
        mut on_log: impl FnMut(&LossRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<Option<LossRecord>> {
        cfg.validate()?;
        flow.validate()?;
        let mut last = None;
        while self.step < cfg.steps {
            let rec = self.train_step(pairs, flow, cfg)?;
            if rec.step % cfg.log_every == 0 || rec.step == cfg.steps {
                on_log(&rec)?;
            }
            if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 && rec.step < cfg.steps {
                on_checkpoint(self)?;
            }
            last = Some(rec);
        }
        Ok(last)
    }
}

/// Held-out one-step accuracy in raw coefficient units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepEval {
    /// Mean `‖Ĉ_1 − C_1‖_F`.
    pub prediction_error: f64,
    /// Mean `‖C_h − C_1‖_F`.
    pub prior_gap: f64,
    /// Mean squared position error of the decoded execution interval.
    pub trajectory_mse: f64,
    pub pairs: usize,
}

impl OneStepEval {
    pub fn relative_error(&self) -> f64 {
        self.prediction_error / self.prior_gap
    }
}

/// Points per execution interval used for the decoded trajectory error.
const EVAL_POINTS: usize = 64;

/// Integrates every pair's source in one batch; gaussian sources are drawn
/// from `stream(seed, Rollout, i)` for pair `i`.
pub fn evaluate(
    model: &Mlp,
    pairs: &[FlowPair],
    normalizer: &ScaleNormalizer,
    window: &FitWindowConfig,
    mode: PriorMode,
    n_nfe: usize,
    seed: u64,
) -> Result<OneStepEval> {
    if pairs.is_empty() {
        return Err(FlashError::Parameter("no evaluation pairs".into()));
    }
    let rows = model.coeff_len();
    let cond_len = model.cond_len();
    let mut start = DMatrix::zeros(rows, pairs.len());
    let mut cond = DMatrix::zeros(cond_len, pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let src = inference_source(&p.c_h, mode, &mut stream(seed, Domain::Rollout, i as u64))?;
        start.column_mut(i).copy_from_slice(src.values().as_slice());
        cond.column_mut(i).copy_from_slice(&p.e);
    }
    let out = euler_infer_batch(model, &start, &cond, n_nfe)?;
    let (k, d) = pairs[0].c_1.values().shape();
    let (a, b) = (window.s_front(), window.s_rear());
    let grid: Vec<f64> = (0..EVAL_POINTS)
        .map(|i| a + (b - a) * i as f64 / (EVAL_POINTS - 1) as f64)
        .collect();
    let basis = basis_matrix(&grid, k - 1, MatrixUse::Evaluation)?;
    let (mut err, mut gap, mut traj) = (0.0, 0.0, 0.0);
    for (i, p) in pairs.iter().enumerate() {
        let pred = DMatrix::from_column_slice(k, d, out.column(i).as_slice());
        let diff = normalizer.denormalize_values(&(pred - p.c_1.values()))?;
        let prior = normalizer.denormalize_values(&(p.c_h.values() - p.c_1.values()))?;
        err += diff.norm();
        gap += prior.norm();
        traj += (basis.values() * diff).norm_squared() / (EVAL_POINTS * d) as f64;
    }
    let n = pairs.len() as f64;
    Ok(OneStepEval {
        prediction_error: err / n,
        prior_gap: gap / n,
        trajectory_mse: traj / n,
        pairs: pairs.len(),
    })
}
