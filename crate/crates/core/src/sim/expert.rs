use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Trajectory;
use crate::error::{FlashError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MinJerk,
    Sinusoid,
    ViaPoints,
}

/// Sampling layout of a generated demonstration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertParams {
    pub dims: usize,
    pub expert_hz: f64,
    /// Episode length in seconds; steps `0..=round(duration·f)` form the episode.
    pub duration: f64,
    /// Extra samples before step 0 and after the last episode step.
    pub pad_before: usize,
    pub pad_after: usize,
}

impl ExpertParams {
    pub fn episode_steps(&self) -> usize {
        (self.duration * self.expert_hz).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.dims == 0 || !(self.expert_hz > 0.0) || !(self.duration > 0.0) {
            return Err(FlashError::Generation(format!("invalid expert layout {self:?}")));
        }
        Ok(())
    }
}

/// Quintic on `[t0, t0 + h]` in powers of `t − t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quintic {
    t0: f64,
    c: [f64; 6],
}

impl Quintic {
    /// Matches position, velocity and acceleration at both ends.
    fn hermite(t0: f64, h: f64, p: [f64; 2], v: [f64; 2], a: [f64; 2]) -> Self {
        let dp = p[1] - p[0];
        let c3 = (20.0 * dp - (8.0 * v[1] + 12.0 * v[0]) * h - (3.0 * a[0] - a[1]) * h * h) / (2.0 * h.powi(3));
        let c4 = (-30.0 * dp + (14.0 * v[1] + 16.0 * v[0]) * h + (3.0 * a[0] - 2.0 * a[1]) * h * h)
            / (2.0 * h.powi(4));
        let c5 = (12.0 * dp - 6.0 * (v[1] + v[0]) * h - (a[0] - a[1]) * h * h) / (2.0 * h.powi(5));
        Self {
            t0,
            c: [p[0], v[0], a[0] / 2.0, c3, c4, c5],
        }
    }

    fn eval(&self, t: f64, order: usize) -> f64 {
        let x = t - self.t0;
        let c = &self.c;
        match order {
            0 => c[0] + x * (c[1] + x * (c[2] + x * (c[3] + x * (c[4] + x * c[5])))),
            1 => c[1] + x * (2.0 * c[2] + x * (3.0 * c[3] + x * (4.0 * c[4] + x * 5.0 * c[5]))),
            _ => 2.0 * c[2] + x * (6.0 * c[3] + x * (12.0 * c[4] + x * 20.0 * c[5])),
        }
    }
}

/// Analytic reference motion; evaluable at any time, including outside the episode.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertProfile {
    /// Quintic rest-to-rest move starting at `t = 0`, holding outside `[0, duration]`.
    MinJerk { q0: Vec<f64>, q1: Vec<f64>, duration: f64 },
    /// `amplitude · sin(omega·t + phase) + offset` per joint.
    Sinusoid {
        amplitude: Vec<f64>,
        omega: Vec<f64>,
        phase: Vec<f64>,
        offset: Vec<f64>,
    },
    /// Piecewise quintic through `points` at `times` with Catmull-Rom knot
    /// velocities and zero knot accelerations; holds outside the knot range.
    ViaPoints {
        times: Vec<f64>,
        points: Vec<Vec<f64>>,
        segments: Vec<Vec<Quintic>>,
    },
}

impl ExpertProfile {
    pub fn min_jerk(q0: Vec<f64>, q1: Vec<f64>, duration: f64) -> Result<Self> {
        if q0.len() != q1.len() || q0.is_empty() || !(duration > 0.0) {
            return Err(FlashError::Generation("min-jerk needs matching endpoints and a positive duration".into()));
        }
        Ok(Self::MinJerk { q0, q1, duration })
    }

    pub fn sinusoid(amplitude: Vec<f64>, omega: Vec<f64>, phase: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let d = amplitude.len();
        if d == 0 || omega.len() != d || phase.len() != d || offset.len() != d {
            return Err(FlashError::Generation("sinusoid parameters disagree on joint count".into()));
        }
        Ok(Self::Sinusoid {
            amplitude,
            omega,
            phase,
            offset,
        })
    }

    pub fn via_points(times: Vec<f64>, points: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() < 2 || times.len() != points.len() {
            return Err(FlashError::Generation(format!(
                "via-point path needs at least 2 knots with one time each, got {} times and {} points",
                times.len(),
                points.len()
            )));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(FlashError::Generation(format!("via-point times must increase (knot {})", i + 1)));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|x| !x.is_finite())) {
            return Err(FlashError::Generation("via points must be finite and share a joint count".into()));
        }
        let m = times.len();
        let vel = |i: usize, j: usize| -> f64 {
            if i == 0 || i == m - 1 {
                0.0
            } else {
                (points[i + 1][j] - points[i - 1][j]) / (times[i + 1] - times[i - 1])
            }
        };
        let segments = (0..d)
            .map(|j| {
                (0..m - 1)
                    .map(|i| {
                        Quintic::hermite(
                            times[i],
                            times[i + 1] - times[i],
                            [points[i][j], points[i + 1][j]],
                            [vel(i, j), vel(i + 1, j)],
                            [0.0, 0.0],
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Self::ViaPoints {
            times,
            points,
            segments,
        })
    }

    pub fn dims(&self) -> usize {
        match self {
            Self::MinJerk { q0, .. } => q0.len(),
            Self::Sinusoid { amplitude, .. } => amplitude.len(),
            Self::ViaPoints { points, .. } => points[0].len(),
        }
    }

    /// Time derivative of order 0 (position), 1 or 2 at `t` seconds.
    pub fn eval(&self, t: f64, order: usize) -> Vec<f64> {
        match self {
            Self::MinJerk { q0, q1, duration } => {
                let u = (t / duration).clamp(0.0, 1.0);
                let inside = t > 0.0 && t < *duration;
                let shape = match order {
                    0 => u * u * u * (10.0 - 15.0 * u + 6.0 * u * u),
                    1 if inside => 30.0 * u * u * (1.0 - u) * (1.0 - u) / duration,
                    2 if inside => 60.0 * u * (1.0 - 3.0 * u + 2.0 * u * u) / (duration * duration),
                    _ => 0.0,
                };
                q0.iter()
                    .zip(q1)
                    .map(|(a, b)| if order == 0 { a + (b - a) * shape } else { (b - a) * shape })
                    .collect()
            }
            Self::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => (0..amplitude.len())
                .map(|j| {
                    let arg = omega[j] * t + phase[j];
                    let a = amplitude[j];
                    match order {
                        0 => a * arg.sin() + offset[j],
                        1 => a * omega[j] * arg.cos(),
                        _ => -a * omega[j] * omega[j] * arg.sin(),
                    }
                })
                .collect(),
            Self::ViaPoints {
                times,
                points,
                segments,
            } => {
                let last = times.len() - 1;
                if t <= times[0] || t >= times[last] {
                    let p = if t <= times[0] { &points[0] } else { &points[last] };
                    return if order == 0 { p.clone() } else { vec![0.0; p.len()] };
                }
                let i = times.partition_point(|&x| x <= t).saturating_sub(1).min(last - 1);
                segments.iter().map(|seg| seg[i].eval(t, order)).collect()
            }
        }
    }

    /// Task descriptor fed to the policy as conditioning.
    ///
    /// Min-jerk: goal and duration; sinusoid: amplitude, angular frequency,
    /// phase and offset per joint; via points: final point and end time.
    pub fn descriptor(&self) -> Vec<f64> {
        match self {
            Self::MinJerk { q1, duration, .. } => q1.iter().copied().chain([*duration]).collect(),
            Self::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => amplitude
                .iter()
                .chain(omega)
                .chain(phase)
                .chain(offset)
                .copied()
                .collect(),
            Self::ViaPoints { times, points, .. } => points[points.len() - 1]
                .iter()
                .copied()
                .chain([times[times.len() - 1]])
                .collect(),
        }
    }

    /// Draws randomized parameters for `kind` within an episode of `duration` seconds.
    pub fn sample<R: Rng + ?Sized>(kind: TaskKind, dims: usize, duration: f64, rng: &mut R) -> Result<Self> {
        fn draw<R: Rng + ?Sized>(rng: &mut R, dims: usize, lo: f64, hi: f64) -> Vec<f64> {
            (0..dims).map(|_| rng.random_range(lo..hi)).collect()
        }
        match kind {
            TaskKind::MinJerk => {
                let q0 = draw(rng, dims, -1.0, 1.0);
                let q1 = draw(rng, dims, -1.0, 1.0);
                let d = rng.random_range(0.6..0.9) * duration;
                Self::min_jerk(q0, q1, d)
            }
            TaskKind::Sinusoid => {
                let amplitude = draw(rng, dims, 0.2, 0.5);
                let omega = draw(rng, dims, 0.4, 1.0).into_iter().map(|f| 2.0 * PI * f).collect();
                let phase = draw(rng, dims, 0.0, 2.0 * PI);
                let offset = draw(rng, dims, -0.3, 0.3);
                Self::sinusoid(amplitude, omega, phase, offset)
            }
            TaskKind::ViaPoints => {
                let knots = 5;
                let end = 0.9 * duration;
                let mut times: Vec<f64> = (0..knots)
                    .map(|i| {
                        let base = end * i as f64 / (knots - 1) as f64;
                        let jitter = if i == 0 || i == knots - 1 {
                            0.0
                        } else {
                            rng.random_range(-0.15..0.15) * end / (knots - 1) as f64
                        };
                        base + jitter
                    })
                    .collect();
                times[0] = 0.0;
                let points = (0..knots).map(|_| draw(rng, dims, -1.0, 1.0)).collect();
                Self::via_points(times, points)
            }
        }
    }
}

/// A sampled demonstration with its generating profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub kind: TaskKind,
    pub profile: ExpertProfile,
    /// Steps `−pad_before ..= episode_steps + pad_after` at `expert_hz`.
    pub trajectory: Trajectory,
    pub episode_steps: usize,
}

impl Expert {
    /// Samples `profile` on the expert grid described by `params`.
    pub fn from_profile(kind: TaskKind, profile: ExpertProfile, params: &ExpertParams) -> Result<Self> {
        params.validate()?;
        if profile.dims() != params.dims {
            return Err(FlashError::Generation(format!(
                "profile has {} joints, layout asks for {}",
                profile.dims(),
                params.dims
            )));
        }
        let n = params.episode_steps();
        let rows = params.pad_before + n + 1 + params.pad_after;
        let start = -(params.pad_before as i64);
        let mut samples = DMatrix::zeros(rows, params.dims);
        for i in 0..rows {
            let t = (start + i as i64) as f64 / params.expert_hz;
            for (j, v) in profile.eval(t, 0).into_iter().enumerate() {
                samples[(i, j)] = v;
            }
        }
        let trajectory = Trajectory::new(samples, params.expert_hz, start)?;
        Ok(Self {
            kind,
            profile,
            trajectory,
            episode_steps: n,
        })
    }

    pub fn descriptor(&self) -> Vec<f64> {
        self.profile.descriptor()
    }
}

/// Smooth randomized demonstration of the given kind.
pub fn gen_expert<R: Rng + ?Sized>(kind: TaskKind, params: &ExpertParams, rng: &mut R) -> Result<Expert> {
    params.validate()?;
    let profile = ExpertProfile::sample(kind, params.dims, params.duration, rng)?;
    Expert::from_profile(kind, profile, params)
}
