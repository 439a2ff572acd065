//! Parameter sweeps over seeded rollouts and inference-latency accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::codec::ScaleNormalizer;
use crate::config::RunConfig;
use crate::error::{FlashError, Result};
use crate::io::write_json;
use crate::model::Mlp;
use crate::pipeline;
use crate::sim::{compute_metrics, Metrics, RolloutRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepPolicy {
    /// Decode the expert's own window fits; no training.
    Oracle,
    /// Train one model per distinct training configuration.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    /// An alias (see [`parameter_pointers`]) or a JSON pointer into [`RunConfig`].
    pub parameter: String,
    pub values: Vec<Value>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default = "default_policy")]
    pub policy: SweepPolicy,
    /// Defaults to the base config's output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Concurrent cells; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

fn default_seeds() -> usize {
    20
}

fn default_policy() -> SweepPolicy {
    SweepPolicy::Oracle
}

/// Config locations written by a sweep parameter. `k` moves the evaluation
/// stride with the training stride so playback stays at nominal speed.
pub fn parameter_pointers(parameter: &str) -> Vec<String> {
    let alias: &[&str] = match parameter {
        "k" | "stride" => &["/codec/window/stride", "/rollout/k_eval"],
        "k_eval" => &["/rollout/k_eval"],
        "degree" => &["/codec/degree"],
        "padding" => &["/codec/window/padding"],
        "kkt" => &["/codec/kkt"],
        "n_nfe" | "nfe" => &["/flow/n_nfe"],
        "prior_mode" | "prior" => &["/flow/prior_mode"],
        "lambda_cons" => &["/flow/lambda_cons"],
        "sigma_h" => &["/flow/sigma_h"],
        "lambda_h" => &["/codec/lambda_h"],
        "velocity_ff" => &["/gains/velocity_ff"],
        "task" => &["/data/task"],
        _ => return vec![parameter.to_string()],
    };
    alias.iter().map(|s| s.to_string()).collect()
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(FlashError::Config("sweep needs at least one value".into()));
        }
        if self.seeds == 0 {
            return Err(FlashError::Config("sweep needs at least one seed".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(FlashError::Config(format!("invalid sweep name {:?}", self.name)));
        }
        self.base.validate()
    }

    /// The base config with cell `value` applied. `variant` selects the
    /// FLASH (history prior, one step) or FLASH-G (gaussian prior, ten
    /// steps) configuration.
    pub fn cell_config(&self, value: &Value) -> Result<RunConfig> {
        let mut doc = serde_json::to_value(&self.base)?;
        let writes: Vec<(String, Value)> = if self.parameter == "variant" {
            let (mode, nfe) = match value.as_str() {
                Some("flash") => ("history", 1),
                Some("flash_g") => ("gaussian", 10),
                _ => return Err(FlashError::Config(format!("unknown variant {value}"))),
            };
            vec![
                ("/flow/prior_mode".into(), Value::from(mode)),
                ("/flow/n_nfe".into(), Value::from(nfe)),
            ]
        } else {
            parameter_pointers(&self.parameter)
                .into_iter()
                .map(|p| (p, value.clone()))
                .collect()
        };
        for (pointer, v) in writes {
            let slot = doc
                .pointer_mut(&pointer)
                .ok_or_else(|| FlashError::Config(format!("no config field at {pointer}")))?;
            *slot = v;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| FlashError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hash of everything that shapes a trained model; inference-only and
/// rollout settings are excluded so cells that differ only there share it.
pub fn training_key(cfg: &RunConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = v.as_object_mut() {
        for k in ["rollout", "plant", "gains", "paths"] {
            obj.remove(k);
        }
    }
    if let Some(flow) = v.pointer_mut("/flow").and_then(Value::as_object_mut) {
        flow.remove("n_nfe");
    }
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub value: Value,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation (`n − 1`), zero for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Paired comparison of one cell against the reference cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Paired {
    /// `mean(d) / (sd(d)/√n)` over per-seed differences `d = cell − reference`.
    pub t_statistic: f64,
    /// `mean(d) / sd(d)`.
    pub cohens_d: f64,
    pub n: usize,
}

pub fn paired(cell: &[f64], reference: &[f64]) -> Option<Paired> {
    if cell.len() != reference.len() || cell.len() < 2 {
        return None;
    }
    let d: Vec<f64> = cell.iter().zip(reference).map(|(a, b)| a - b).collect();
    let s = Stat::of(&d);
    let n = d.len();
    Some(Paired {
        t_statistic: s.mean / (s.std / (n as f64).sqrt()),
        cohens_d: s.mean / s.std,
        n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub value: Value,
    pub config_hash: String,
    pub ok: usize,
    pub failed: usize,
    pub mae_total: Stat,
    pub iae: Stat,
    pub peak_error: Stat,
    pub junction_velocity_gap: Stat,
    pub calls: Stat,
    pub mean_call_ms: Stat,
    /// Against cell 0 over the seeds both completed; `None` for cell 0.
    pub mae_vs_first: Option<Paired>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub parameter: String,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellSummary>,
}

struct Trained {
    model: Mlp,
    normalizer: ScaleNormalizer,
}

fn train_cell(cfg: &RunConfig) -> Result<Trained> {
    let prepared = pipeline::prepare(cfg)?;
    let trainer = pipeline::train(cfg, &prepared, |_| Ok(()))?;
    Ok(Trained {
        model: trainer.model,
        normalizer: prepared.normalizer,
    })
}

fn run_cell(cfg: &RunConfig, policy: SweepPolicy, trained: Option<&Trained>, seed: u64) -> Result<RolloutRecord> {
    match (policy, trained) {
        (SweepPolicy::Oracle, _) => pipeline::run_episode(cfg, &pipeline::oracle_policy(cfg), seed),
        (SweepPolicy::Learned, Some(t)) => {
            pipeline::run_episode(cfg, &pipeline::learned_policy(cfg, &t.model, &t.normalizer)?, seed)
        }
        (SweepPolicy::Learned, None) => Err(FlashError::Config("learned cell has no model".into())),
    }
}

/// Runs every (cell, seed) pair. A failing cell or seed is recorded in its
/// row and the sweep carries on; results are ordered by cell then seed.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let configs: Vec<Result<RunConfig>> = spec.values.iter().map(|v| spec.cell_config(v)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| FlashError::Config(e.to_string()))?;

    let mut models: BTreeMap<String, std::result::Result<Arc<Trained>, String>> = BTreeMap::new();
    if spec.policy == SweepPolicy::Learned {
        let mut keys: Vec<(String, RunConfig)> = Vec::new();
        for cfg in configs.iter().flatten() {
            let key = training_key(cfg);
            if !keys.iter().any(|(k, _)| *k == key) {
                keys.push((key, cfg.clone()));
            }
        }
        let trained: Vec<_> = pool.install(|| {
            keys.par_iter()
                .map(|(k, cfg)| (k.clone(), train_cell(cfg).map(Arc::new).map_err(|e| e.to_string())))
                .collect()
        });
        models.extend(trained);
    }

    let jobs: Vec<(usize, u64)> = (0..spec.values.len())
        .flat_map(|c| (0..spec.seeds as u64).map(move |s| (c, s)))
        .collect();
    let rows: Vec<SweepRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| {
                let outcome = configs[cell].as_ref().map_err(|e| e.to_string()).and_then(|cfg| {
                    let trained = match spec.policy {
                        SweepPolicy::Learned => Some(models[&training_key(cfg)].clone()?),
                        SweepPolicy::Oracle => None,
                    };
                    run_cell(cfg, spec.policy, trained.as_deref(), seed)
                        .and_then(|r| compute_metrics(&r))
                        .map_err(|e| e.to_string())
                });
                let (metrics, error) = match outcome {
                    Ok(m) => (Some(m), None),
                    Err(e) => (None, Some(e)),
                };
                SweepRow {
                    cell,
                    value: spec.values[cell].clone(),
                    seed,
                    metrics,
                    error,
                }
            })
            .collect()
    });

    let cells = summarize(spec, &configs, &rows);
    Ok(SweepResult {
        name: spec.name.clone(),
        parameter: spec.parameter.clone(),
        rows,
        cells,
    })
}

fn summarize(spec: &SweepSpec, configs: &[Result<RunConfig>], rows: &[SweepRow]) -> Vec<CellSummary> {
    let per_cell: Vec<Vec<&SweepRow>> = (0..spec.values.len())
        .map(|c| rows.iter().filter(|r| r.cell == c).collect())
        .collect();
    let mae_by_seed = |c: usize| -> BTreeMap<u64, f64> {
        per_cell[c]
            .iter()
            .filter_map(|r| r.metrics.as_ref().map(|m| (r.seed, m.mae_total)))
            .collect()
    };
    let reference = mae_by_seed(0);
    per_cell
        .iter()
        .enumerate()
        .map(|(c, rs)| {
            let ok: Vec<&Metrics> = rs.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let stat = |f: fn(&Metrics) -> f64| Stat::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            let mae_vs_first = (c > 0).then(|| {
                let mine = mae_by_seed(c);
                let (a, b): (Vec<f64>, Vec<f64>) =
                    mine.iter().filter_map(|(s, v)| reference.get(s).map(|r| (*v, *r))).unzip();
                paired(&a, &b)
            });
            CellSummary {
                cell: c,
                value: spec.values[c].clone(),
                config_hash: configs[c].as_ref().map(|cfg| cfg.hash()).unwrap_or_default(),
                ok: ok.len(),
                failed: rs.len() - ok.len(),
                mae_total: stat(|m| m.mae_total),
                iae: stat(|m| m.iae),
                peak_error: stat(|m| m.peak_error),
                junction_velocity_gap: stat(|m| m.junction_velocity_gap),
                calls: stat(|m| m.calls as f64),
                mean_call_ms: stat(|m| m.mean_call_ms),
                mae_vs_first: mae_vs_first.flatten(),
            }
        })
        .collect()
}

/// Writes `<name>_results.csv` (one row per cell and seed) and
/// `<name>_summary.json`; returns both paths.
pub fn write_sweep(result: &SweepResult, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}_results.csv", result.name));
    let json_path = dir.join(format!("{}_summary.json", result.name));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "cell",
        "value",
        "seed",
        "mae_total",
        "iae",
        "peak_error",
        "junction_position_gap",
        "junction_velocity_gap",
        "calls",
        "mean_call_ms",
        "error",
    ])?;
    for r in &result.rows {
        let mut rec = vec![r.cell.to_string(), r.value.to_string(), r.seed.to_string()];
        match &r.metrics {
            Some(m) => rec.extend([
                format!("{:.16e}", m.mae_total),
                format!("{:.16e}", m.iae),
                format!("{:.16e}", m.peak_error),
                format!("{:.16e}", m.junction_position_gap),
                format!("{:.16e}", m.junction_velocity_gap),
                m.calls.to_string(),
                format!("{:.6}", m.mean_call_ms),
                String::new(),
            ]),
            None => {
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(r.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_json(&json_path, result)?;
    Ok((csv_path, json_path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Spread {
    /// Nearest-rank percentiles; the median averages the middle pair.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Self {
            mean: s.iter().sum::<f64>() / n as f64,
            median,
            p95: s[rank - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub calls: usize,
    pub per_call_ms: Option<Spread>,
    pub per_episode_ms: Option<Spread>,
    /// Total inference time over total executed control steps.
    pub per_step_ms: f64,
}

pub fn latency_report(records: &[RolloutRecord]) -> LatencyReport {
    let per_call: Vec<f64> = records.iter().flat_map(|r| r.calls.iter().map(|c| c.ms)).collect();
    let per_episode: Vec<f64> = records.iter().map(|r| r.calls.iter().map(|c| c.ms).sum()).collect();
    let steps: usize = records.iter().map(RolloutRecord::len).sum();
    LatencyReport {
        calls: per_call.len(),
        per_call_ms: Spread::of(&per_call),
        per_episode_ms: Spread::of(&per_episode),
        per_step_ms: if steps > 0 { per_episode.iter().sum::<f64>() / steps as f64 } else { 0.0 },
    }
}
