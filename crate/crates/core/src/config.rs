//! One versioned document holding every tunable of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::FitWindowConfig;
use crate::dataset::{DataConfig, TargetSpec};
use crate::error::{FlashError, Result};
use crate::flow::FlowConfig;
use crate::model::{Activation, Architecture};
use crate::sim::{ControllerGains, PlantParams, RolloutConfig};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that replaces `paths.output_root`.
pub const OUTPUT_ROOT_ENV: &str = "FLASH_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Legendre degree `K`.
    pub degree: usize,
    pub window: FitWindowConfig,
    /// History samples `T_o`.
    pub history_len: usize,
    pub lambda_h: f64,
    /// Apply the anchor correction to training targets.
    pub kkt: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            degree: 6,
            window: FitWindowConfig::default(),
            history_len: 4,
            lambda_h: 0.1,
            kkt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub tau_features: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            activation: Activation::Silu,
            tau_features: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub episode_steps: usize,
    pub k_eval: f64,
    pub replan_every: Option<usize>,
    /// One episode per seed, each with a freshly drawn expert.
    pub seeds: Vec<u64>,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let run = RolloutConfig::default();
        Self {
            episode_steps: run.episode_steps,
            k_eval: run.k_eval,
            replan_every: run.replan_every,
            seeds: (0..5).collect(),
        }
    }
}

impl RolloutSection {
    pub fn run(&self) -> RolloutConfig {
        RolloutConfig {
            episode_steps: self.episode_steps,
            k_eval: self.k_eval,
            replan_every: self.replan_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output_root: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub flow: FlowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutSection,
    pub plant: PlantParams,
    pub gains: ControllerGains,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            flow: FlowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rollout: RolloutSection::default(),
            plant: PlantParams::default(),
            gains: ControllerGains::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| FlashError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(FlashError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.validate()?;
        let c = &self.codec;
        c.window.validate(c.degree)?;
        if c.history_len < 2 {
            return Err(FlashError::Config("history_len must be at least 2".into()));
        }
        if !(c.lambda_h > 0.0) {
            return Err(FlashError::Config("lambda_h must be positive".into()));
        }
        self.flow.validate()?;
        self.train.validate()?;
        self.plant.validate()?;
        self.gains.validate()?;
        let r = &self.rollout;
        if !(r.k_eval > 0.0) || r.episode_steps == 0 || r.seeds.is_empty() {
            return Err(FlashError::Config(
                "rollout needs k_eval > 0, a positive episode length and at least one seed".into(),
            ));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) || self.model.tau_features % 2 != 0 {
            return Err(FlashError::Config("model needs positive hidden widths and an even tau_features".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON with the paths removed, so moving a
    /// run does not change its identity.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// `paths.output_root`, unless the environment overrides it.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.paths.output_root.clone(),
        }
    }

    pub fn target_spec(&self) -> TargetSpec {
        TargetSpec {
            degree: self.codec.degree,
            window: self.codec.window,
            history_len: self.codec.history_len,
            lambda_h: self.codec.lambda_h,
            kkt: self.codec.kkt,
            sample_every: self.data.sample_every,
        }
    }

    pub fn architecture(&self, cond_len: usize) -> Architecture {
        Architecture {
            coeff_rows: self.codec.degree + 1,
            dims: self.data.dims,
            cond_len,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            tau_features: self.model.tau_features,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_document_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "codec": {"window": {"stride": 2}}, "rollout": {"k_eval": 8.0}}"#)
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.codec.window.stride, 2);
        assert_eq!(cfg.codec.window.exec_steps, 8);
        assert_eq!(cfg.codec.degree, 6);
        assert_eq!(cfg.rollout.k_eval, 8.0);
        assert_eq!(cfg.rollout.episode_steps, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"codec": {"degre": 6}}"#,
            r#"{"codec": {"window": {"strides": 4}}}"#,
            r#"{"flow": {"sigma": 0.5}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(FlashError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            r#"{"version": 2}"#,
            r#"{"data": {"demos": 0}}"#,
            r#"{"codec": {"lambda_h": 0.0}}"#,
            r#"{"codec": {"degree": 20}}"#,
            r#"{"rollout": {"seeds": []}}"#,
            r#"{"gains": {"kp": -1.0}}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.output_root = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.flow.n_nfe = 10;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
