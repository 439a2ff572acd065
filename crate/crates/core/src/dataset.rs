//! Demonstration corpora and the `(C_h, C_1, e)` training targets built from them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codec::{fit_window, CoeffMatrix, FitWindowConfig, HistoryFitter, ScaleNormalizer, Trajectory};
use crate::error::{FlashError, Result};
use crate::flow::FlowPair;
use crate::rng::{stream, Domain};
use crate::sim::{gen_expert, window_margins, Expert, ExpertParams, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    pub demos: usize,
    pub dims: usize,
    /// Demonstration length in seconds.
    pub duration: f64,
    /// Expert steps between consecutive training windows.
    pub sample_every: usize,
    /// Trailing demonstrations kept out of training.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::MinJerk,
            demos: 100,
            dims: 7,
            duration: 3.0,
            sample_every: 1,
            holdout: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos == 0 {
            return Err(FlashError::Config("demos must be at least 1".into()));
        }
        if self.dims == 0 || self.sample_every == 0 || !(self.duration > 0.0) {
            return Err(FlashError::Config(format!("invalid data settings {self:?}")));
        }
        if self.holdout >= self.demos && self.holdout > 0 {
            return Err(FlashError::Config(format!(
                "holdout {} leaves no training demos out of {}",
                self.holdout, self.demos
            )));
        }
        Ok(())
    }

    pub fn expert_params(&self, window: &FitWindowConfig) -> ExpertParams {
        let (pad_before, pad_after) = window_margins(window);
        ExpertParams {
            dims: self.dims,
            expert_hz: window.expert_hz,
            duration: self.duration,
            pad_before,
            pad_after,
        }
    }
}

/// Demonstration `i` is drawn from its own stream, so corpora of different
/// sizes share their leading demos.
pub fn generate_demos(cfg: &DataConfig, window: &FitWindowConfig, seed: u64) -> Result<Vec<Expert>> {
    cfg.validate()?;
    let params = cfg.expert_params(window);
    (0..cfg.demos)
        .map(|i| gen_expert(cfg.task, &params, &mut stream(seed, Domain::Data, i as u64)))
        .collect()
}

/// `e = [history (time-major) | task descriptor | elapsed seconds]`.
pub fn conditioning(history: &DMatrix<f64>, descriptor: &[f64], time: f64) -> Vec<f64> {
    let mut e = Vec::with_capacity(history.len() + descriptor.len() + 1);
    for r in history.row_iter() {
        e.extend(r.iter());
    }
    e.extend_from_slice(descriptor);
    e.push(time);
    e
}

pub fn conditioning_len(history_len: usize, dims: usize, descriptor_len: usize) -> usize {
    history_len * dims + descriptor_len + 1
}

/// What target building needs from a demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub trajectory: Trajectory,
    pub episode_steps: usize,
    pub descriptor: Vec<f64>,
}

impl From<&Expert> for Demo {
    fn from(e: &Expert) -> Self {
        Self {
            trajectory: e.trajectory.clone(),
            episode_steps: e.episode_steps,
            descriptor: e.descriptor(),
        }
    }
}

/// How training targets are cut from a demonstration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSpec {
    pub degree: usize,
    pub window: FitWindowConfig,
    pub history_len: usize,
    pub lambda_h: f64,
    pub kkt: bool,
    pub sample_every: usize,
}

/// Raw (unnormalized) coefficients for one anchor step of one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTarget {
    pub demo: usize,
    pub step: i64,
    pub c_h: CoeffMatrix,
    pub c_1: CoeffMatrix,
    pub e: Vec<f64>,
}

/// History `T_o × d_a` ending at `step`, held at step 0 before the episode start.
pub fn history_window(traj: &Trajectory, step: i64, len: usize) -> Result<DMatrix<f64>> {
    let d = traj.dims();
    let mut h = DMatrix::zeros(len, d);
    for i in 0..len {
        let s = (step - (len - 1 - i) as i64).max(0);
        for (j, v) in traj.at(s)?.into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    Ok(h)
}

/// Extends the recording by holding its end samples when a window would
/// otherwise run past it. The codec itself never clamps.
fn clamp_for_windows(traj: &Trajectory, cfg: &FitWindowConfig, last_step: i64) -> Trajectory {
    let k = cfg.stride as i64;
    let first = 1 - k * (cfg.padding + cfg.overlap_pre) as i64 - 2;
    let last = last_step + 1 + k * (cfg.exec_steps + cfg.overlap_post + cfg.padding) as i64 + 2;
    let before = (traj.start_step() - first).max(0) as usize;
    let after = (last - traj.end_step()).max(0) as usize;
    if before == 0 && after == 0 {
        traj.clone()
    } else {
        traj.padded_hold(before, after)
    }
}

/// One target per anchor step `t = 0, s, 2s, …` inside each demonstration's episode.
pub fn build_targets(demos: &[Demo], spec: &TargetSpec) -> Result<Vec<TrainingTarget>> {
    spec.window.validate(spec.degree)?;
    if spec.sample_every == 0 {
        return Err(FlashError::Parameter("sample_every must be at least 1".into()));
    }
    let fitter = HistoryFitter::new(spec.history_len, spec.degree, spec.lambda_h)?;
    let mut out = Vec::new();
    for (index, demo) in demos.iter().enumerate() {
        let last = demo.episode_steps as i64 - 1;
        let traj = clamp_for_windows(&demo.trajectory, &spec.window, last.max(0));
        let descriptor = &demo.descriptor;
        let f = traj.frequency();
        for t in (0..=last.max(0)).step_by(spec.sample_every) {
            let fit = fit_window(&traj, &spec.window, spec.degree, t, spec.kkt, None)?;
            let history = history_window(&demo.trajectory, t, spec.history_len)?;
            out.push(TrainingTarget {
                demo: index,
                step: t,
                c_h: fitter.fit(&history)?,
                c_1: fit.target().clone(),
                e: conditioning(&history, descriptor, t as f64 / f),
            });
        }
    }
    Ok(out)
}

/// Splits off targets whose demo index is among the last `holdout` demos.
pub fn split_holdout(targets: Vec<TrainingTarget>, demos: usize, holdout: usize) -> (Vec<TrainingTarget>, Vec<TrainingTarget>) {
    let cut = demos.saturating_sub(holdout);
    targets.into_iter().partition(|t| t.demo < cut)
}

/// Row scales over the history and target coefficients together. The
/// history fit lives on its own short grid and spreads energy into high
/// orders that the targets barely use, so scales taken from `C_1` alone
/// would blow the source up by orders of magnitude.
pub fn fit_normalizer(targets: &[TrainingTarget]) -> Result<ScaleNormalizer> {
    ScaleNormalizer::fit(targets.iter().flat_map(|t| [&t.c_h, &t.c_1]))
}

pub fn to_pairs(targets: &[TrainingTarget], normalizer: &ScaleNormalizer) -> Result<Vec<FlowPair>> {
    targets
        .iter()
        .map(|t| {
            Ok(FlowPair {
                c_h: normalizer.normalize(&t.c_h)?,
                c_1: normalizer.normalize(&t.c_1)?,
                e: t.e.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (DataConfig, FitWindowConfig) {
        let cfg = DataConfig {
            demos: 3,
            dims: 2,
            duration: 2.0,
            sample_every: 5,
            holdout: 1,
            ..Default::default()
        };
        (cfg, FitWindowConfig::default())
    }

    fn as_demos(experts: &[Expert]) -> Vec<Demo> {
        experts.iter().map(Demo::from).collect()
    }

    fn spec(window: FitWindowConfig) -> TargetSpec {
        TargetSpec {
            degree: 6,
            window,
            history_len: 4,
            lambda_h: 0.1,
            kkt: true,
            sample_every: 5,
        }
    }

    #[test]
    fn corpus_is_seeded_and_prefix_stable() {
        let (cfg, w) = small();
        let a = generate_demos(&cfg, &w, 11).unwrap();
        let b = generate_demos(&cfg, &w, 11).unwrap();
        assert_eq!(a, b);
        let more = generate_demos(&DataConfig { demos: 5, ..cfg }, &w, 11).unwrap();
        assert_eq!(&more[..3], &a[..]);
        assert!(generate_demos(&DataConfig { demos: 0, ..cfg }, &w, 11).is_err());
    }

    #[test]
    fn targets_cover_every_sampled_step() {
        let (cfg, w) = small();
        let demos = generate_demos(&cfg, &w, 1).unwrap();
        let targets = build_targets(&as_demos(&demos), &spec(w)).unwrap();
        // 100 episode steps sampled every 5
        assert_eq!(targets.len(), 3 * 20);
        let len = conditioning_len(4, 2, demos[0].descriptor().len());
        assert!(targets.iter().all(|t| t.e.len() == len));
        let (train, held) = split_holdout(targets, 3, 1);
        assert_eq!(train.len(), 40);
        assert!(held.iter().all(|t| t.demo == 2));
    }

    #[test]
    fn corrected_targets_hit_expert_anchors() {
        let (cfg, w) = small();
        let demos = generate_demos(&cfg, &w, 2).unwrap();
        let targets = build_targets(&as_demos(&demos[..1]), &spec(w)).unwrap();
        let traj = &demos[0].trajectory;
        for t in &targets {
            let c = t.c_1.values();
            let phi = crate::basis::eval_basis(w.s_front(), 6).unwrap();
            for j in 0..2 {
                let p: f64 = (0..7).map(|i| phi[i] * c[(i, j)]).sum();
                assert!((p - traj.at(t.step + 1).unwrap()[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn early_history_is_held_at_start() {
        let (cfg, w) = small();
        let demos = generate_demos(&cfg, &w, 3).unwrap();
        let h = history_window(&demos[0].trajectory, 1, 4).unwrap();
        let q0 = demos[0].trajectory.at(0).unwrap();
        for i in 0..3 {
            assert_eq!(h.row(i).iter().copied().collect::<Vec<_>>(), q0);
        }
        assert_eq!(h.row(3).iter().copied().collect::<Vec<_>>(), demos[0].trajectory.at(1).unwrap());
    }

    #[test]
    fn pairs_are_normalized() {
        let (cfg, w) = small();
        let demos = generate_demos(&cfg, &w, 4).unwrap();
        let targets = build_targets(&as_demos(&demos), &spec(w)).unwrap();
        let norm = fit_normalizer(&targets).unwrap();
        let pairs = to_pairs(&targets, &norm).unwrap();
        assert!(pairs.iter().all(|p| p.c_h.is_normalized() && p.c_1.is_normalized()));
        // every normalized row has unit population std over sources and targets
        for r in 0..7 {
            let xs: Vec<f64> = pairs
                .iter()
                .flat_map(|p| [&p.c_h, &p.c_1])
                .flat_map(|c| c.values().row(r).iter().copied().collect::<Vec<_>>())
                .collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }
}
