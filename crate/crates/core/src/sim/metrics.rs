use serde::{Deserialize, Serialize};

use super::rollout::RolloutRecord;
use crate::error::{FlashError, Result};

/// Tracking and inference summary of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_per_joint: Vec<f64>,
    /// Mean of the per-joint MAEs.
    pub mae_total: f64,
    /// `∫ Σ_j |e_j(t)| dt`, trapezoidal at the control step.
    pub iae: f64,
    pub peak_error: f64,
    pub junction_position_gap: f64,
    pub junction_velocity_gap: f64,
    pub calls: usize,
    pub mean_call_ms: f64,
    pub episode_inference_ms: f64,
    pub steps: usize,
}

pub fn compute_metrics(record: &RolloutRecord) -> Result<Metrics> {
    if record.is_empty() {
        return Err(FlashError::EmptyRecord);
    }
    let e = record.error().abs();
    let n = e.nrows();
    let mae_per_joint: Vec<f64> = e.column_iter().map(|c| c.sum() / n as f64).collect();
    let mae_total = mae_per_joint.iter().sum::<f64>() / mae_per_joint.len() as f64;
    let row_sums: Vec<f64> = e.row_iter().map(|r| r.sum()).collect();
    let iae = row_sums.windows(2).map(|w| 0.5 * (w[0] + w[1]) * record.dt).sum();
    let peak_error = e.max();
    let junction_position_gap = record.junctions.iter().map(|j| j.position_gap).fold(0.0, f64::max);
    let junction_velocity_gap = record.junctions.iter().map(|j| j.velocity_gap).fold(0.0, f64::max);
    let episode_inference_ms: f64 = record.calls.iter().map(|c| c.ms).sum();
    let calls = record.calls.len();
    Ok(Metrics {
        mae_per_joint,
        mae_total,
        iae,
        peak_error,
        junction_position_gap,
        junction_velocity_gap,
        calls,
        mean_call_ms: if calls > 0 { episode_inference_ms / calls as f64 } else { 0.0 },
        episode_inference_ms,
        steps: n,
    })
}
