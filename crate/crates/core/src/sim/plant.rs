use serde::{Deserialize, Serialize};

use crate::error::{FlashError, Result};

/// Joint positions and velocities at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let d = q.len();
        Self {
            q,
            qdot: vec![0.0; d],
            t: 0.0,
        }
    }
}

/// Decoupled inertia–damper joints, all sharing the same parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    /// kg·m²
    pub inertia: f64,
    /// N·m·s/rad
    pub damping: f64,
    /// Control timestep in seconds.
    pub dt: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            inertia: 1.0,
            damping: 5.0,
            dt: 1e-3,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0) || !(self.damping >= 0.0) || !(self.dt > 0.0) {
            return Err(FlashError::Parameter(format!("invalid plant parameters {self:?}")));
        }
        Ok(())
    }

    pub fn control_hz(&self) -> f64 {
        1.0 / self.dt
    }
}

/// PD gains with optional velocity feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    pub kp: f64,
    pub kd: f64,
    pub velocity_ff: bool,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp: 400.0,
            kd: 40.0,
            velocity_ff: true,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.kd >= 0.0) {
            return Err(FlashError::Parameter(format!("gains must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// `τ = Kp (q_d − q) + Kd (q̇_d − q̇)`, with `q̇_d = 0` when feed-forward is off.
pub fn controller_torque(state: &PlantState, q_d: &[f64], qdot_d: &[f64], gains: &ControllerGains) -> Vec<f64> {
    (0..state.q.len())
        .map(|j| {
            let v_ref = if gains.velocity_ff { qdot_d[j] } else { 0.0 };
            gains.kp * (q_d[j] - state.q[j]) + gains.kd * (v_ref - state.qdot[j])
        })
        .collect()
}

/// Semi-implicit Euler: `q̈ = (τ − b q̇)/I`, `q̇ += q̈ dt`, `q += q̇ dt`.
///
/// `step` only labels a divergence error.
pub fn plant_step(state: &PlantState, torque: &[f64], params: &PlantParams, step: usize) -> Result<PlantState> {
    if torque.len() != state.q.len() {
        return Err(FlashError::Shape(format!(
            "{} torques for {} joints",
            torque.len(),
            state.q.len()
        )));
    }
    let mut next = state.clone();
    for j in 0..state.q.len() {
        let acc = (torque[j] - params.damping * state.qdot[j]) / params.inertia;
        next.qdot[j] += acc * params.dt;
        next.q[j] += next.qdot[j] * params.dt;
    }
    next.t += params.dt;
    if next.q.iter().chain(&next.qdot).any(|x| !x.is_finite()) {
        return Err(FlashError::PhysicsDivergence { step });
    }
    Ok(next)
}
