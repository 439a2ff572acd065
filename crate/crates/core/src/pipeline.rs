//! End-to-end stages driven by a [`RunConfig`]; shared by the CLI and sweeps.

use crate::codec::{HistoryFitter, ScaleNormalizer};
use crate::config::RunConfig;
use crate::dataset::{build_targets, Demo, fit_normalizer, generate_demos, split_holdout, to_pairs, TrainingTarget};
use crate::error::{FlashError, Result};
use crate::flow::FlowPair;
use crate::io::{CheckpointDoc, NormalizerDoc, FORMAT_VERSION};
use crate::model::{Mlp, VelocityField};
use crate::rng::{stream, Domain};
use crate::sim::{gen_expert, rollout, Expert, ExpertParams, LearnedPolicy, Policy, RolloutRecord};
use crate::train::{LossRecord, Trainer};

/// Targets split by demo, with the normalizer fitted on the training side.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<TrainingTarget>,
    pub held_out: Vec<TrainingTarget>,
    pub normalizer: ScaleNormalizer,
    pub train_demos: usize,
}

impl Prepared {
    pub fn from_targets(targets: Vec<TrainingTarget>, demos: usize, holdout: usize) -> Result<Self> {
        let train_demos = demos.saturating_sub(holdout);
        let (train, held_out) = split_holdout(targets, demos, holdout);
        if train.is_empty() {
            return Err(FlashError::Config("no training targets".into()));
        }
        let normalizer = fit_normalizer(&train)?;
        Ok(Self {
            train,
            held_out,
            normalizer,
            train_demos,
        })
    }

    pub fn train_pairs(&self) -> Result<Vec<FlowPair>> {
        to_pairs(&self.train, &self.normalizer)
    }

    pub fn held_out_pairs(&self) -> Result<Vec<FlowPair>> {
        to_pairs(&self.held_out, &self.normalizer)
    }

    pub fn cond_len(&self) -> usize {
        self.train[0].e.len()
    }
}

pub fn demos(cfg: &RunConfig) -> Result<Vec<Expert>> {
    generate_demos(&cfg.data, &cfg.codec.window, cfg.seed)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let demos: Vec<Demo> = demos(cfg)?.iter().map(Demo::from).collect();
    let targets = build_targets(&demos, &cfg.target_spec())?;
    Prepared::from_targets(targets, cfg.data.demos, cfg.data.holdout)
}

pub fn init_trainer(cfg: &RunConfig, cond_len: usize) -> Result<Trainer> {
    let model = Mlp::new(cfg.architecture(cond_len), &mut stream(cfg.seed, Domain::Init, 0))?;
    Ok(Trainer::new(model, cfg.seed))
}

/// Trains from scratch for `cfg.train.steps`.
pub fn train(cfg: &RunConfig, prepared: &Prepared, on_log: impl FnMut(&LossRecord) -> Result<()>) -> Result<Trainer> {
    let pairs = prepared.train_pairs()?;
    let mut trainer = init_trainer(cfg, prepared.cond_len())?;
    trainer.run(&pairs, &cfg.flow, &cfg.train, on_log, |_| Ok(()))?;
    Ok(trainer)
}

pub fn checkpoint(cfg: &RunConfig, trainer: &Trainer, normalizer: &ScaleNormalizer) -> CheckpointDoc {
    CheckpointDoc {
        version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        step: trainer.step,
        seed: trainer.seed,
        architecture: trainer.model.architecture().clone(),
        params: trainer.model.params().to_vec(),
        adam: trainer.adam.clone(),
        normalizer: NormalizerDoc::new(normalizer),
        window: cfg.codec.window,
        degree: cfg.codec.degree,
        history_len: cfg.codec.history_len,
        lambda_h: cfg.codec.lambda_h,
        flow: cfg.flow,
    }
}

/// The evaluation expert for one rollout seed, drawn independently of the
/// training corpus.
pub fn episode_expert(cfg: &RunConfig, seed: u64) -> Result<Expert> {
    let window = &cfg.codec.window;
    let (pad_before, pad_after) = crate::sim::window_margins(window);
    let params = ExpertParams {
        dims: cfg.data.dims,
        expert_hz: window.expert_hz,
        duration: cfg.rollout.episode_steps as f64 / window.expert_hz,
        pad_before,
        pad_after,
    };
    gen_expert(cfg.data.task, &params, &mut stream(seed, Domain::Episode, 0))
}

pub fn oracle_policy(cfg: &RunConfig) -> Policy<'static> {
    Policy::Oracle {
        window: cfg.codec.window,
        degree: cfg.codec.degree,
        history_len: cfg.codec.history_len,
        kkt: cfg.codec.kkt,
    }
}

pub fn learned_policy<'a>(cfg: &RunConfig, model: &'a Mlp, normalizer: &'a ScaleNormalizer) -> Result<Policy<'a>> {
    Ok(Policy::Learned(LearnedPolicy {
        model,
        normalizer,
        window: cfg.codec.window,
        degree: cfg.codec.degree,
        history: HistoryFitter::new(cfg.codec.history_len, cfg.codec.degree, cfg.codec.lambda_h)?,
        prior_mode: cfg.flow.prior_mode,
        n_nfe: cfg.flow.n_nfe,
    }))
}

/// One closed-loop episode for `seed`; the prior draw uses `stream(seed, Rollout, 0)`.
pub fn run_episode(cfg: &RunConfig, policy: &Policy, seed: u64) -> Result<RolloutRecord> {
    let expert = episode_expert(cfg, seed)?;
    rollout(
        policy,
        &expert,
        &cfg.rollout.run(),
        &cfg.plant,
        &cfg.gains,
        &mut stream(seed, Domain::Rollout, 0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.demos = 4;
        cfg.data.holdout = 1;
        cfg.data.dims = 1;
        cfg.data.duration = 1.0;
        cfg.data.sample_every = 10;
        cfg.model.hidden = vec![16];
        cfg.train.steps = 5;
        cfg.train.batch_size = 4;
        cfg.rollout.episode_steps = 40;
        cfg
    }

    #[test]
    fn prepare_splits_by_demo() {
        let p = prepare(&tiny()).unwrap();
        assert_eq!(p.train_demos, 3);
        assert_eq!(p.train.len(), 15);
        assert_eq!(p.held_out.len(), 5);
        assert!(p.held_out.iter().all(|t| t.demo == 3));
    }

    #[test]
    fn learned_episode_is_deterministic() {
        let cfg = tiny();
        let p = prepare(&cfg).unwrap();
        let t = train(&cfg, &p, |_| Ok(())).unwrap();
        assert_eq!(t.step, 5);
        let policy = learned_policy(&cfg, &t.model, &p.normalizer).unwrap();
        let a = run_episode(&cfg, &policy, 3).unwrap();
        let b = run_episode(&cfg, &policy, 3).unwrap();
        assert!(a.same_trajectory(&b));
        assert_eq!(a.calls.len(), 2);
        let doc = checkpoint(&cfg, &t, &p.normalizer);
        assert_eq!(doc.model().unwrap(), t.model);
    }
}
