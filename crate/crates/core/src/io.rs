//! Versioned JSON documents and CSV files exchanged between pipeline stages.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{CoeffMatrix, FitWindowConfig, ScaleNormalizer, Trajectory};
use crate::dataset::{Demo, TrainingTarget};
use crate::error::{FlashError, Result};
use crate::flow::FlowConfig;
use crate::model::{AdamState, Architecture, Mlp};
use crate::sim::{Metrics, RolloutRecord, TaskKind};

pub const FORMAT_VERSION: u32 = 1;

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(FlashError::Format("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn check_version(kind: &str, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(FlashError::Format(format!(
            "{kind} document version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// A coefficient matrix with its degree, width and window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffDoc {
    pub version: u32,
    pub degree: usize,
    pub dims: usize,
    pub window: Option<FitWindowConfig>,
    pub normalized: bool,
    /// Row-major, one row per Legendre order.
    pub values: Vec<Vec<f64>>,
}

impl CoeffDoc {
    pub fn new(c: &CoeffMatrix) -> Self {
        Self {
            version: FORMAT_VERSION,
            degree: c.degree(),
            dims: c.dims(),
            window: c.window().copied(),
            normalized: c.is_normalized(),
            values: rows_of(c.values()),
        }
    }

    pub fn to_coeffs(&self) -> Result<CoeffMatrix> {
        check_version("coefficient", self.version)?;
        let values = matrix_of(&self.values)?;
        if values.shape() != (self.degree + 1, self.dims) {
            return Err(FlashError::Format(format!(
                "values are {:?}, header says degree {} and {} dims",
                values.shape(),
                self.degree,
                self.dims
            )));
        }
        if self.normalized {
            CoeffMatrix::from_normalized(values, self.window)
        } else {
            CoeffMatrix::new(values, self.window)
        }
    }
}

pub fn write_coeffs(path: &Path, c: &CoeffMatrix) -> Result<()> {
    write_json(path, &CoeffDoc::new(c))
}

pub fn read_coeffs(path: &Path) -> Result<CoeffMatrix> {
    read_json::<CoeffDoc>(path)?.to_coeffs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerDoc {
    pub version: u32,
    pub scales: Vec<f64>,
}

impl NormalizerDoc {
    pub fn new(n: &ScaleNormalizer) -> Self {
        Self {
            version: FORMAT_VERSION,
            scales: n.scales().to_vec(),
        }
    }

    pub fn to_normalizer(&self) -> Result<ScaleNormalizer> {
        check_version("normalizer", self.version)?;
        ScaleNormalizer::from_scales(self.scales.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRow {
    pub demo: usize,
    pub step: i64,
    pub c_h: Vec<Vec<f64>>,
    pub c_1: Vec<Vec<f64>>,
    pub e: Vec<f64>,
}

/// Raw training targets plus the normalizer fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsDoc {
    pub version: u32,
    pub config_hash: String,
    pub degree: usize,
    pub dims: usize,
    pub window: FitWindowConfig,
    pub history_len: usize,
    pub lambda_h: f64,
    pub kkt: bool,
    /// Demos with index below this are training data, the rest held out.
    pub train_demos: usize,
    pub normalizer: NormalizerDoc,
    pub targets: Vec<TargetRow>,
}

impl TargetsDoc {
    pub fn rows(targets: &[TrainingTarget]) -> Vec<TargetRow> {
        targets
            .iter()
            .map(|t| TargetRow {
                demo: t.demo,
                step: t.step,
                c_h: rows_of(t.c_h.values()),
                c_1: rows_of(t.c_1.values()),
                e: t.e.clone(),
            })
            .collect()
    }

    pub fn targets(&self) -> Result<Vec<TrainingTarget>> {
        check_version("targets", self.version)?;
        self.targets
            .iter()
            .map(|r| {
                let c_h = matrix_of(&r.c_h)?;
                let c_1 = matrix_of(&r.c_1)?;
                if c_h.shape() != (self.degree + 1, self.dims) || c_1.shape() != c_h.shape() {
                    return Err(FlashError::Format(format!("target for demo {} step {} has the wrong shape", r.demo, r.step)));
                }
                Ok(TrainingTarget {
                    demo: r.demo,
                    step: r.step,
                    c_h: CoeffMatrix::new(c_h, None)?,
                    c_1: CoeffMatrix::new(c_1, Some(self.window))?,
                    e: r.e.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoEntry {
    pub index: usize,
    /// Trajectory CSV, relative to the manifest.
    pub file: String,
    pub task: TaskKind,
    pub episode_steps: usize,
    pub descriptor: Vec<f64>,
}

/// Index of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub version: u32,
    pub config_hash: String,
    pub expert_hz: f64,
    pub dims: usize,
    pub demos: Vec<DemoEntry>,
}

impl DataManifest {
    /// Reads every listed trajectory back from `dir`.
    pub fn load_demos(&self, dir: &Path) -> Result<Vec<Demo>> {
        check_version("data manifest", self.version)?;
        self.demos
            .iter()
            .map(|d| {
                let trajectory = read_trajectory_csv(&dir.join(&d.file), self.expert_hz)?;
                if trajectory.dims() != self.dims {
                    return Err(FlashError::Format(format!("{} has {} joints, expected {}", d.file, trajectory.dims(), self.dims)));
                }
                Ok(Demo {
                    trajectory,
                    episode_steps: d.episode_steps,
                    descriptor: d.descriptor.clone(),
                })
            })
            .collect()
    }
}

/// Everything needed to run or resume a trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDoc {
    pub version: u32,
    pub config_hash: String,
    pub step: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub normalizer: NormalizerDoc,
    pub window: FitWindowConfig,
    pub degree: usize,
    pub history_len: usize,
    pub lambda_h: f64,
    pub flow: FlowConfig,
}

impl CheckpointDoc {
    pub fn model(&self) -> Result<Mlp> {
        check_version("checkpoint", self.version)?;
        let model = Mlp::from_params(self.architecture.clone(), self.params.clone())?;
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(FlashError::Format("optimizer state does not match the parameter count".into()));
        }
        Ok(model)
    }
}

/// Writes `step,joint_0,…` rows with 17 significant digits.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend((0..traj.dims()).map(|j| format!("joint_{j}")));
    w.write_record(&header)?;
    for (i, r) in traj.samples().row_iter().enumerate() {
        let mut rec = vec![(traj.start_step() + i as i64).to_string()];
        rec.extend(r.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path, frequency: f64) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let dims = r.headers()?.len().saturating_sub(1);
    if dims == 0 {
        return Err(FlashError::Format("trajectory CSV has no joint columns".into()));
    }
    let mut start = None;
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| FlashError::Format(format!("row {i}: {e}")));
        let step: i64 = rec[0].parse().map_err(|e| FlashError::Format(format!("row {i}: {e}")))?;
        let first = *start.get_or_insert(step);
        if step != first + i as i64 {
            return Err(FlashError::Format(format!("row {i}: steps must be consecutive")));
        }
        for j in 0..dims {
            values.push(parse(&rec[j + 1])?);
        }
    }
    let n = values.len() / dims;
    Trajectory::new(DMatrix::from_row_slice(n, dims, &values), frequency, start.unwrap_or(0))
}

/// Per-tick rows `t, q_d_j…, q_j…, qdot_d_j…, e_j…`.
pub fn write_rollout_csv(path: &Path, rec: &RolloutRecord) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = rec.dims();
    let mut header = vec!["t".to_string()];
    for prefix in ["q_d", "q", "qdot_d", "e"] {
        header.extend((0..d).map(|j| format!("{prefix}_{j}")));
    }
    w.write_record(&header)?;
    let err = rec.error();
    for i in 0..rec.len() {
        let mut row = vec![format!("{:.16e}", rec.t[i])];
        for m in [&rec.q_d, &rec.q, &rec.qdot_d, &err] {
            row.extend((0..d).map(|j| format!("{:.16e}", m[(i, j)])));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON companion of a rollout CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSummary {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub divergence: Option<usize>,
    pub metrics: Metrics,
}

/// Appends one JSON object per line.
pub struct NdjsonWriter {
    inner: BufWriter<File>,
}

impl NdjsonWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            inner: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self {
            inner: BufWriter::new(File::options().create(true).append(true).open(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, row)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
