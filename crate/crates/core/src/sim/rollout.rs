use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::expert::Expert;
use super::plant::{controller_torque, plant_step, ControllerGains, PlantParams, PlantState};
use crate::codec::{fit_window, FitWindowConfig, HistoryFitter, ScaleNormalizer, SliceDecoder};
use crate::dataset::conditioning;
use crate::error::{FlashError, Result};
use crate::flow::{euler_infer, inference_source, PriorMode};
use crate::model::Mlp;

/// Episode layout and replanning of one closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Episode length in expert steps of task progress.
    pub episode_steps: usize,
    /// Playback stride; equal to the training stride for nominal speed.
    pub k_eval: f64,
    /// Control ticks between inference calls; `None` executes each segment fully.
    pub replan_every: Option<usize>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            episode_steps: 128,
            k_eval: 4.0,
            replan_every: None,
        }
    }
}

/// Everything the learned policy needs besides the plant.
#[derive(Debug, Clone)]
pub struct LearnedPolicy<'a> {
    pub model: &'a Mlp,
    pub normalizer: &'a ScaleNormalizer,
    pub window: FitWindowConfig,
    pub degree: usize,
    pub history: HistoryFitter,
    pub prior_mode: PriorMode,
    pub n_nfe: usize,
}

/// Source of the commanded trajectory.
#[derive(Debug, Clone)]
pub enum Policy<'a> {
    /// History fit, one- or multi-step flow, denormalize, decode.
    Learned(LearnedPolicy<'a>),
    /// Decodes the expert's own window fit (KKT-corrected when `kkt`).
    Oracle {
        window: FitWindowConfig,
        degree: usize,
        history_len: usize,
        kkt: bool,
    },
    /// Holds each raw expert sample for one expert period with its
    /// finite-difference velocity.
    ExpertHold,
}

impl Policy<'_> {
    fn window(&self) -> Option<(&FitWindowConfig, usize)> {
        match self {
            Policy::Learned(p) => Some((&p.window, p.degree)),
            Policy::Oracle { window, degree, .. } => Some((window, *degree)),
            Policy::ExpertHold => None,
        }
    }

    fn history_len(&self) -> usize {
        match self {
            Policy::Learned(p) => p.history.len(),
            Policy::Oracle { history_len, .. } => *history_len,
            Policy::ExpertHold => 1,
        }
    }
}

/// Timing of one inference call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub tick: usize,
    pub ms: f64,
}

/// Command discontinuity where a new segment takes over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub tick: usize,
    pub position_gap: f64,
    pub velocity_gap: f64,
}

/// Per-tick closed-loop trace; rows are control ticks, columns joints.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub dt: f64,
    pub t: Vec<f64>,
    pub q_d: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub qdot_d: DMatrix<f64>,
    pub qdot: DMatrix<f64>,
    pub calls: Vec<CallRecord>,
    pub junctions: Vec<Junction>,
    /// Control step at which the plant diverged, if it did.
    pub divergence: Option<usize>,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.q.ncols()
    }

    /// `q_d − q`.
    pub fn error(&self) -> DMatrix<f64> {
        &self.q_d - &self.q
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.t == other.t
            && self.q_d == other.q_d
            && self.q == other.q
            && self.qdot_d == other.qdot_d
            && self.qdot == other.qdot
            && self.junctions == other.junctions
            && self.divergence == other.divergence
            && self.calls.iter().map(|c| c.tick).eq(other.calls.iter().map(|c| c.tick))
    }
}

struct Segment {
    positions: DMatrix<f64>,
    velocities: DMatrix<f64>,
    /// State one tick past the last executed sample.
    rear: (Vec<f64>, Vec<f64>),
}

/// Control ticks per expert step of task progress.
fn ticks_per_step(expert_hz: f64, control_hz: f64, speed: f64) -> Result<f64> {
    let raw = control_hz / expert_hz * speed;
    if !(raw >= 1.0 && raw.is_finite()) {
        return Err(FlashError::Parameter(format!(
            "control rate {control_hz} Hz must be at least the scaled expert rate ({raw} ticks per step)"
        )));
    }
    Ok(raw)
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Runs one closed-loop episode against `expert`.
///
/// At every replanning tick the policy sees the last `T_o` measured positions
/// (spaced one expert step of task progress apart, held at the initial state
/// before `t = 0`) and returns a segment that is fed to the controller at the
/// plant rate. Only the policy call is timed.
pub fn rollout<R: Rng + ?Sized>(
    policy: &Policy,
    expert: &Expert,
    cfg: &RolloutConfig,
    plant: &PlantParams,
    gains: &ControllerGains,
    rng: &mut R,
) -> Result<RolloutRecord> {
    plant.validate()?;
    gains.validate()?;
    if cfg.episode_steps == 0 {
        return Err(FlashError::Parameter("episode needs at least one step".into()));
    }
    let traj = &expert.trajectory;
    let d = traj.dims();
    let f = traj.frequency();
    let control_hz = plant.control_hz();

    let decoder = match policy.window() {
        Some((w, degree)) => Some(SliceDecoder::new(w, degree, cfg.k_eval, control_hz)?),
        None => None,
    };
    let speed = match policy.window() {
        Some((w, _)) => cfg.k_eval / w.stride as f64,
        None => 1.0,
    };
    let per_step = ticks_per_step(f, control_hz, speed)?;
    let tick_step = per_step.round() as usize;
    let seg_len = decoder.as_ref().map_or(tick_step, |dec| dec.len());
    let cadence = match (policy, cfg.replan_every) {
        (Policy::ExpertHold, _) | (_, None) => seg_len,
        (_, Some(c)) if c == 0 || c > seg_len => {
            return Err(FlashError::Parameter(format!(
                "replanning every {c} ticks, segments only hold {seg_len}"
            )))
        }
        (_, Some(c)) => c,
    };
    let total = (cfg.episode_steps as f64 * per_step).round() as usize;

    let q0 = expert.profile.eval(0.0, 0);
    let mut state = PlantState {
        qdot: expert.profile.eval(0.0, 1),
        q: q0,
        t: 0.0,
    };
    let mut t = Vec::with_capacity(total);
    let (mut q_d, mut q, mut qdot_d, mut qdot) = (
        Vec::with_capacity(total * d),
        Vec::with_capacity(total * d),
        Vec::with_capacity(total * d),
        Vec::with_capacity(total * d),
    );
    let mut measured: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut calls = Vec::new();
    let mut junctions = Vec::new();
    let mut divergence = None;

    let mut segment: Option<Segment> = None;
    let mut cursor = 0;
    let mut progress = 0.0_f64;
    let t_o = policy.history_len();

    for tick in 0..total {
        measured.push(state.q.clone());
        if segment.is_none() || cursor == cadence {
            let history = DMatrix::from_fn(t_o, d, |i, j| {
                let back = (t_o - 1 - i) * tick_step;
                measured[tick.saturating_sub(back)][j]
            });
            let step = progress.round() as i64;
            let started = Instant::now();
            let next = plan(policy, decoder.as_ref(), expert, &history, step, tick_step, rng)?;
            calls.push(CallRecord {
                tick,
                ms: started.elapsed().as_secs_f64() * 1e3,
            });
            if let Some(prev) = &segment {
                let (pp, pv) = if cursor < prev.positions.nrows() {
                    (row(&prev.positions, cursor), row(&prev.velocities, cursor))
                } else {
                    prev.rear.clone()
                };
                let gap = |a: &[f64], b: Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                junctions.push(Junction {
                    tick,
                    position_gap: gap(&pp, row(&next.positions, 0)),
                    velocity_gap: gap(&pv, row(&next.velocities, 0)),
                });
            }
            progress += match policy.window() {
                Some((w, _)) => w.steps_per_call() as f64 * cadence as f64 / seg_len as f64,
                None => 1.0,
            };
            segment = Some(next);
            cursor = 0;
        }
        let seg = segment.as_ref().expect("segment planned above");
        let des: Vec<f64> = row(&seg.positions, cursor);
        let vdes: Vec<f64> = row(&seg.velocities, cursor);
        cursor += 1;

        t.push(state.t);
        q_d.extend_from_slice(&des);
        q.extend_from_slice(&state.q);
        qdot_d.extend_from_slice(&vdes);
        qdot.extend_from_slice(&state.qdot);

        let torque = controller_torque(&state, &des, &vdes, gains);
        match plant_step(&state, &torque, plant, tick) {
            Ok(next) => state = next,
            Err(FlashError::PhysicsDivergence { step }) => {
                log::warn!("plant diverged at control step {step}; returning partial record");
                divergence = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let n = t.len();
    Ok(RolloutRecord {
        dt: plant.dt,
        t,
        q_d: DMatrix::from_row_slice(n, d, &q_d),
        q: DMatrix::from_row_slice(n, d, &q),
        qdot_d: DMatrix::from_row_slice(n, d, &qdot_d),
        qdot: DMatrix::from_row_slice(n, d, &qdot),
        calls,
        junctions,
        divergence,
    })
}

fn plan<R: Rng + ?Sized>(
    policy: &Policy,
    decoder: Option<&SliceDecoder>,
    expert: &Expert,
    history: &DMatrix<f64>,
    step: i64,
    hold_ticks: usize,
    rng: &mut R,
) -> Result<Segment> {
    let coeffs = match policy {
        Policy::ExpertHold => {
            let traj = &expert.trajectory;
            let hold = traj.at(step)?;
            let vel = traj.derivative(step, 1)?;
            let d = hold.len();
            return Ok(Segment {
                positions: DMatrix::from_fn(hold_ticks, d, |_, j| hold[j]),
                velocities: DMatrix::from_fn(hold_ticks, d, |_, j| vel[j]),
                rear: (traj.at(step + 1)?, traj.derivative(step + 1, 1)?),
            });
        }
        Policy::Oracle { window, degree, kkt, .. } => {
            fit_window(&expert.trajectory, window, *degree, step, *kkt, None)?.target().clone()
        }
        Policy::Learned(p) => {
            let c_h = p.normalizer.normalize(&p.history.fit(history)?)?;
            let e = conditioning(history, &expert.descriptor(), step as f64 / expert.trajectory.frequency());
            let start = inference_source(&c_h, p.prior_mode, rng)?;
            let c_hat = euler_infer(p.model, &start, &e, p.n_nfe)?;
            p.normalizer.denormalize(&c_hat)?
        }
    };
    let dec = decoder.expect("windowed policies build a decoder");
    let seg = dec.decode(&coeffs)?;
    let (rp, rv) = dec.rear_state(&coeffs)?;
    Ok(Segment {
        positions: seg.positions,
        velocities: seg.velocities,
        rear: (rp.iter().copied().collect(), rv.iter().copied().collect()),
    })
}
