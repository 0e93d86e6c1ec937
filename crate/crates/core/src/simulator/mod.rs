//! Closed-loop kinematic simulation with a perfect-tracking plant.
//!
//! Every tick the controller receives the previously integrated joint reference (never a
//! measured state), computes a joint-velocity reference, and the plant integrates it with
//! explicit Euler: `q(t + dt) = q(t) + dt * qdot_des(t)`.

mod trace;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Approach, ControlError, Controller, ControllerConfig, Mode};
use crate::kinematics::{place_tool, Chain, JointVector, KinematicsError};
use crate::pattern::{DesiredSpray, LawnMowerPattern, PatternError, SprayPattern};
use crate::tasks::{intersect_ray, Surface, TaskError};

pub use trace::{read_trace_csv, write_trace_csv, TraceParseError, TraceRow, TRACE_HEADER};

/// Controller rate of the robot interface (125 Hz).
pub const DEFAULT_DT: f64 = 0.008;
/// Pre-roll before the pattern clock starts (s).
pub const DEFAULT_CONVERGENCE_PHASE: f64 = 3.0;
/// Spray-task error that aborts a run (m).
pub const DIVERGENCE_LIMIT: f64 = 0.5;
/// Joint speed flagged by the safety guard (rad/s).
pub const SAFETY_JOINT_SPEED: f64 = std::f64::consts::PI;
/// Seed for placing the tool above the pattern start: elbow up, wrist down.
pub const DEFAULT_IK_SEED: [f64; 6] = [0.0, -1.2, 1.6, -1.9, -1.57, 0.0];

const CALIBRATION_TOLERANCE: f64 = 0.01;
const CALIBRATION_MAX_RUNS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("spray task error {error:.3} m exceeds {limit} m at t = {t:.3} s")]
    Diverged { t: f64, error: f64, limit: f64 },
    #[error("joint {joint} speed {speed:.3} rad/s exceeds the safety limit at t = {t:.3} s")]
    SafetyStop { t: f64, joint: usize, speed: f64 },
    #[error("speed calibration did not converge after {runs} runs (U = {speed:.4}, measured {measured:.4}, target {target:.4})")]
    NoConvergence {
        runs: usize,
        speed: f64,
        measured: f64,
        target: f64,
    },
    #[error("invalid simulation configuration: {0}")]
    InvalidConfig(String),
}

impl From<TaskError> for SimError {
    fn from(e: TaskError) -> Self {
        SimError::Control(e.into())
    }
}

impl From<PatternError> for SimError {
    fn from(e: PatternError) -> Self {
        SimError::Control(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub q_init: JointVector,
    /// Duration of the standard-controller pre-roll toward the pattern start (s).
    pub convergence_phase: f64,
    /// Abort with [`SimError::SafetyStop`] instead of only flagging fast joints.
    pub stop_on_safety: bool,
    pub chain: Chain,
}

impl SimConfig {
    pub fn new(q_init: JointVector) -> Self {
        Self {
            dt: DEFAULT_DT,
            q_init,
            convergence_phase: DEFAULT_CONVERGENCE_PHASE,
            stop_on_safety: false,
            chain: Chain::ur5(),
        }
    }

    /// Configuration whose initial pose puts the nozzle on the pattern start.
    pub fn for_pattern(
        pattern: &dyn SprayPattern,
        surface: &dyn Surface,
        standoff: f64,
    ) -> Result<Self, SimError> {
        let chain = Chain::ur5();
        let start = pattern.desired(0.0, standoff)?;
        let q = initial_configuration(
            &chain,
            &start.sigma.xy(),
            surface,
            standoff,
            &JointVector::from_row_slice(&DEFAULT_IK_SEED),
        )?;
        Ok(Self::new(q))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "dt must be positive (got {})",
                self.dt
            )));
        }
        if self.convergence_phase.is_nan() || self.convergence_phase < 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "convergence phase must be non-negative (got {})",
                self.convergence_phase
            )));
        }
        if self.q_init.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidConfig("q_init must be finite".into()));
        }
        Ok(())
    }
}

/// Joint configuration with the nozzle at `standoff` above `point` along the surface
/// normal, pointing at the surface.
pub fn initial_configuration(
    chain: &Chain,
    point: &Vector2<f64>,
    surface: &dyn Surface,
    standoff: f64,
    seed: &JointVector,
) -> Result<JointVector, SimError> {
    let (hx, hy) = surface.gradient(point.x, point.y);
    let normal = Vector3::new(-hx, -hy, 1.0).normalize();
    let on_surface = Vector3::new(point.x, point.y, surface.height(point.x, point.y));
    let q = place_tool(chain, &(on_surface + normal * standoff), &(-normal), seed)?;
    Ok(q)
}

/// One simulation tick.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    /// Pattern time (s).
    pub t: f64,
    pub q: JointVector,
    pub qdot: JointVector,
    pub mode: Mode,
    pub sigma_fov: f64,
    /// Spray intersection point `(x_i, y_i)`.
    pub spray_point: Vector2<f64>,
    pub k_bar: f64,
    pub ee_position: Vector3<f64>,
    /// Desired `(x_spray, y_spray, k_bar_des)`.
    pub desired: Vector3<f64>,
}

/// Aggregate figures of one run. `energy_proxy` is the integrated squared joint speed,
/// not an electrical energy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// s
    pub completion_time: f64,
    /// m
    pub ee_path_length: f64,
    /// m/s
    pub avg_ee_velocity: f64,
    /// rad^2/s
    pub energy_proxy: f64,
    pub max_sigma_fov: f64,
    /// rad/s^2
    pub max_joint_accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub records: Vec<SimRecord>,
    pub metrics: Metrics,
    /// Times at which some joint exceeded [`SAFETY_JOINT_SPEED`].
    pub safety_events: Vec<f64>,
    pub approach: Approach,
}

impl SimTrace {
    /// Largest `|(x_i, y_i) - (x_spray, y_spray)|` and `|k_bar - k_bar_des|` after `t_from`.
    pub fn tracking_errors(&self, t_from: f64) -> (f64, f64) {
        self.records
            .iter()
            .filter(|r| r.t >= t_from)
            .fold((0.0, 0.0), |(p, k), r| {
                (
                    p.max((r.spray_point - r.desired.xy()).norm()),
                    k.max((r.k_bar - r.desired.z).abs()),
                )
            })
    }

    pub fn mode_switches(&self) -> usize {
        self.records
            .windows(2)
            .filter(|w| w[0].mode != w[1].mode)
            .count()
    }
}

pub fn compute_metrics(records: &[SimRecord]) -> Metrics {
    let Some(first) = records.first() else {
        return Metrics::default();
    };
    let last = records.last().unwrap_or(first);
    let completion_time = last.t - first.t;
    let mut path = 0.0;
    let mut energy = 0.0;
    let mut max_accel: f64 = 0.0;
    for w in records.windows(2) {
        let dt = w[1].t - w[0].t;
        path += (w[1].ee_position - w[0].ee_position).norm();
        energy += w[0].qdot.norm_squared() * dt;
        if dt > 0.0 {
            max_accel = max_accel.max((w[1].qdot - w[0].qdot).norm() / dt);
        }
    }
    let max_sigma_fov = records.iter().map(|r| r.sigma_fov).fold(0.0, f64::max);
    Metrics {
        completion_time,
        ee_path_length: path,
        avg_ee_velocity: if completion_time > 0.0 {
            path / completion_time
        } else {
            0.0
        },
        energy_proxy: energy,
        max_sigma_fov,
        max_joint_accel: max_accel,
    }
}

/// Holds the pattern start with zero feedforward; drives the pre-roll.
#[derive(Debug)]
struct HoldStart<'a>(&'a dyn SprayPattern);

impl SprayPattern for HoldStart<'_> {
    fn duration(&self) -> f64 {
        f64::INFINITY
    }

    fn desired(&self, _t: f64, standoff: f64) -> Result<DesiredSpray, PatternError> {
        let mut d = self.0.desired(0.0, standoff)?;
        d.sigma_dot = Vector3::zeros();
        Ok(d)
    }
}

/// Runs the pre-roll and then the full pattern.
pub fn run(
    sim: &SimConfig,
    config: &ControllerConfig,
    pattern: &dyn SprayPattern,
    surface: &dyn Surface,
) -> Result<SimTrace, SimError> {
    sim.validate()?;
    let dt = sim.dt;
    let mut q = sim.q_init;

    let pre_steps = (sim.convergence_phase / dt).round() as usize;
    if pre_steps > 0 {
        let mut pre = Controller::new(
            sim.chain.clone(),
            ControllerConfig {
                approach: Approach::St,
                ..config.clone()
            },
        )?;
        let hold = HoldStart(pattern);
        for k in 0..pre_steps {
            let out = pre.step(k as f64 * dt, &q, &hold, surface)?;
            q += out.qdot * dt;
        }
    }

    let mut controller = Controller::new(sim.chain.clone(), config.clone())?;
    let duration = pattern.duration();
    let steps = (duration / dt - 1e-9).ceil().max(0.0) as usize;
    let mut records = Vec::with_capacity(steps + 1);
    let mut safety_events = Vec::new();
    for k in 0..=steps {
        let t = (k as f64 * dt).min(duration);
        let out = controller.step(t, &q, pattern, surface)?;
        let spray = &out.frame.spray;
        let error = (out.desired.sigma - spray.sigma).norm();
        if error > DIVERGENCE_LIMIT {
            return Err(SimError::Diverged {
                t,
                error,
                limit: DIVERGENCE_LIMIT,
            });
        }
        if let Some((joint, speed)) = out
            .qdot
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .find(|(_, v)| *v > SAFETY_JOINT_SPEED)
        {
            if sim.stop_on_safety {
                return Err(SimError::SafetyStop { t, joint, speed });
            }
            safety_events.push(t);
        }
        records.push(SimRecord {
            t: k as f64 * dt,
            q,
            qdot: out.qdot,
            mode: out.mode,
            sigma_fov: out.frame.fov.sigma,
            spray_point: spray.intersection.point,
            k_bar: spray.intersection.k_bar,
            ee_position: out.frame.snapshot.position,
            desired: out.desired.sigma,
        });
        if k < steps {
            q += out.qdot * dt;
        }
    }
    let metrics = compute_metrics(&records);
    Ok(SimTrace {
        records,
        metrics,
        safety_events,
        approach: config.approach,
    })
}

/// Result of [`calibrate_speed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub speed: f64,
    pub runs: usize,
    pub trace: SimTrace,
}

/// Finds the spray speed `U` whose run has the requested average end-effector speed,
/// by the fixed-point iteration `U <- U * target / measured`.
pub fn calibrate_speed(
    target_avg_ee_vel: f64,
    sim: &SimConfig,
    config: &ControllerConfig,
    pattern: &LawnMowerPattern,
    surface: &dyn Surface,
) -> Result<Calibration, SimError> {
    if target_avg_ee_vel.is_nan() || target_avg_ee_vel <= 0.0 {
        return Err(SimError::InvalidConfig(format!(
            "target speed must be positive (got {target_avg_ee_vel})"
        )));
    }
    let mut speed = target_avg_ee_vel;
    let mut measured = 0.0;
    for runs in 1..=CALIBRATION_MAX_RUNS {
        let trial = pattern.with_speed(speed);
        let trace = run(sim, config, &trial, surface)?;
        measured = trace.metrics.avg_ee_velocity;
        if (measured - target_avg_ee_vel).abs() < CALIBRATION_TOLERANCE * target_avg_ee_vel {
            return Ok(Calibration { speed, runs, trace });
        }
        if measured.is_nan() || measured <= 0.0 {
            break;
        }
        speed *= target_avg_ee_vel / measured;
    }
    Err(SimError::NoConvergence {
        runs: CALIBRATION_MAX_RUNS,
        speed,
        measured,
        target: target_avg_ee_vel,
    })
}

/// Nozzle intersection for a configuration, for diagnostics.
pub fn spray_point(
    chain: &Chain,
    q: &JointVector,
    surface: &dyn Surface,
) -> Result<Vector2<f64>, SimError> {
    let snap = chain.forward(q);
    Ok(intersect_ray(surface, &snap.position, &snap.fov)?.point)
}
