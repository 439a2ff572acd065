//! Synthetic experts, a torque-controlled plant and the closed-loop harness.

mod expert;
mod metrics;
mod plant;
mod rollout;

pub use expert::{gen_expert, Expert, ExpertParams, ExpertProfile, Quintic, TaskKind};
pub use metrics::{compute_metrics, Metrics};
pub use plant::{controller_torque, plant_step, ControllerGains, PlantParams, PlantState};
pub use rollout::{rollout, CallRecord, Junction, LearnedPolicy, Policy, RolloutConfig, RolloutRecord};

use crate::codec::FitWindowConfig;

/// Expert samples needed around an episode so every window, anchor stencil
/// and held reference stays inside the recording.
pub fn window_margins(cfg: &FitWindowConfig) -> (usize, usize) {
    let k = cfg.stride;
    let before = k * (cfg.padding + cfg.overlap_pre) + 4;
    let after = k * (cfg.exec_steps + cfg.overlap_post + cfg.padding) + 4;
    (before, after)
}
