//! Switched set-based controller.
//!
//! The nozzle misalignment `sigma_FOV` is a set-based task with valid set
//! `[0, sqrt(2(1 - cos theta))]`. In mode 1 only the spray task is tracked; in mode 2 the
//! FOV task is added as an equality task frozen at the limit. The tangent-cone test on
//! the FOV rate produced by mode 1 decides which mode drives the joints.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{clik_velocity, Chain, JointVector};
use crate::pattern::{DesiredSpray, PatternError, SegmentKind, SprayPattern};
use crate::tasks::{
    evaluate_tasks, fov_sigma_for_angle, FovTaskEval, SprayTaskEval, Surface, TaskError, TaskFrame,
};

/// Blends end once the smoothing weight exceeds this.
pub const BLEND_COMPLETE: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("controller time went backwards ({t} s after {last} s)")]
    TimeReversal { t: f64, last: f64 },
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
}

/// Valid interval `[min, max]` of a scalar set-based task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetBounds {
    min: f64,
    max: f64,
}

impl SetBounds {
    pub fn new(min: f64, max: f64) -> Result<Self, ControlError> {
        if min < max {
            Ok(Self { min, max })
        } else {
            Err(ControlError::InvalidConfig(format!(
                "set bounds need min < max (got [{min}, {max}])"
            )))
        }
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }
}

/// Whether `sigma_dot` lies in the tangent cone of the set at `sigma`.
pub fn in_tangent_cone(sigma_dot: f64, sigma: f64, bounds: SetBounds) -> bool {
    if bounds.min < sigma && sigma < bounds.max {
        true
    } else if sigma <= bounds.min {
        sigma_dot >= 0.0
    } else {
        sigma_dot <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Spray task only; orientation evolves freely.
    Mode1,
    /// Spray task plus FOV frozen at the limit.
    Mode2,
    /// Nozzle held normal to the surface.
    Standard,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Mode1 => "mode1",
            Mode::Mode2 => "mode2",
            Mode::Standard => "standard",
        }
    }

    /// Integer code used in plot data.
    pub fn code(self) -> u8 {
        match self {
            Mode::Standard => 0,
            Mode::Mode1 => 1,
            Mode::Mode2 => 2,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mode1" => Ok(Mode::Mode1),
            "mode2" => Ok(Mode::Mode2),
            "standard" => Ok(Mode::Standard),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// How the controller uses the two modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    /// Nozzle always normal (mode 2 with a zero angle limit).
    #[serde(rename = "ST")]
    St,
    /// Pure set-based switching.
    A,
    /// Standard on straight segments, set-based on turns.
    B,
    /// A with smoothed switches and a buffer angle.
    C,
    /// B with smoothed switches and a buffer angle.
    D,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::St,
        Approach::A,
        Approach::B,
        Approach::C,
        Approach::D,
    ];

    pub fn is_smooth(self) -> bool {
        matches!(self, Approach::C | Approach::D)
    }

    pub fn is_set_based(self) -> bool {
        self != Approach::St
    }

    fn standard_on_straights(self) -> bool {
        matches!(self, Approach::B | Approach::D)
    }

    pub fn label(self) -> &'static str {
        match self {
            Approach::St => "ST",
            Approach::A => "A",
            Approach::B => "B",
            Approach::C => "C",
            Approach::D => "D",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Approach {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "ST" => Ok(Approach::St),
            "A" => Ok(Approach::A),
            "B" => Ok(Approach::B),
            "C" => Ok(Approach::C),
            "D" => Ok(Approach::D),
            other => Err(format!("unknown approach `{other}`")),
        }
    }
}

/// Parameters of the arctangent blend between velocity references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    /// Sharpness (1/s).
    pub a: f64,
    /// Delay before the transition (s).
    pub b: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Self { a: 110.0, b: 0.05 }
    }
}

/// Blend weight `atan(a (t - t_switch - b)) / pi + 1/2`.
pub fn smoothing_alpha(t: f64, t_last_switch: f64, a: f64, b: f64) -> f64 {
    (a * (t - t_last_switch - b)).atan() / std::f64::consts::PI + 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    /// Maximum misalignment between nozzle and anti-normal (rad).
    pub theta: f64,
    /// Buffer below `theta` where smooth approaches switch (rad).
    pub theta0: f64,
    pub lambda1: Matrix3<f64>,
    pub lambda2: Matrix4<f64>,
    pub approach: Approach,
    pub smoothing: Smoothing,
    /// Desired nozzle-to-surface distance along the ray (m).
    pub standoff: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            theta: 20f64.to_radians(),
            theta0: 5f64.to_radians(),
            lambda1: Matrix3::identity() * 0.4,
            lambda2: Matrix4::identity() * 0.4,
            approach: Approach::A,
            smoothing: Smoothing::default(),
            standoff: 0.3,
        }
    }
}

impl ControllerConfig {
    pub fn with_approach(approach: Approach) -> Self {
        Self {
            approach,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |msg: String| Err(ControlError::InvalidConfig(msg));
        if !(self.theta > self.theta0 && self.theta0 >= 0.0) {
            return bad(format!(
                "need theta > theta0 >= 0 (got {} and {})",
                self.theta, self.theta0
            ));
        }
        if !is_positive_definite(&self.lambda1) || !is_positive_definite(&self.lambda2) {
            return bad("gain matrices must be positive definite".into());
        }
        if self.standoff.is_nan() || self.standoff <= 0.0 {
            return bad(format!("standoff must be positive (got {})", self.standoff));
        }
        if !(self.smoothing.a > 0.0 && self.smoothing.b >= 0.0) {
            return bad("smoothing needs a > 0 and b >= 0".into());
        }
        Ok(())
    }

    /// Upper bound of the FOV set used by the tangent-cone test.
    pub fn switch_bound(&self) -> f64 {
        if self.approach.is_smooth() {
            fov_sigma_for_angle(self.theta - self.theta0)
        } else {
            fov_sigma_for_angle(self.theta)
        }
    }
}

fn is_positive_definite<const N: usize>(m: &SMatrix<f64, N, N>) -> bool
where
    nalgebra::Const<N>: nalgebra::DimMin<nalgebra::Const<N>, Output = nalgebra::Const<N>>,
{
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().is_some()
}

fn resolve<const M: usize>(
    jacobian: &SMatrix<f64, M, 6>,
    feedforward: &SMatrix<f64, M, 1>,
    error: &SMatrix<f64, M, 1>,
    gain: &SMatrix<f64, M, M>,
) -> JointVector {
    clik_velocity(
        &DMatrix::from_column_slice(M, 6, jacobian.as_slice()),
        &DVector::from_column_slice(feedforward.as_slice()),
        &DVector::from_column_slice(error.as_slice()),
        &DMatrix::from_column_slice(M, M, gain.as_slice()),
    )
    .expect("statically sized task dimensions")
}

/// Mode 1: `J_spray^+ (sigma1_des_dot + Lambda1 (sigma1_des - sigma1))`.
pub fn mode1_velocity(
    spray: &SprayTaskEval,
    desired: &DesiredSpray,
    lambda1: &Matrix3<f64>,
) -> JointVector {
    let error = desired.sigma - spray.sigma;
    resolve(&spray.jacobian, &desired.sigma_dot, &error, lambda1)
}

/// Stacked `[J_spray; J_fov]` used by mode 2.
pub fn stacked_jacobian(spray: &SprayTaskEval, fov: &FovTaskEval) -> SMatrix<f64, 4, 6> {
    let mut j = SMatrix::<f64, 4, 6>::zeros();
    j.fixed_rows_mut::<3>(0).copy_from(&spray.jacobian);
    j.set_row(3, &fov.jacobian);
    j
}

/// Mode 2: spray task plus the FOV task held at `sqrt(2(1 - cos theta_target))`.
pub fn mode2_velocity(
    spray: &SprayTaskEval,
    fov: &FovTaskEval,
    desired: &DesiredSpray,
    theta_target: f64,
    lambda2: &Matrix4<f64>,
) -> JointVector {
    let j = stacked_jacobian(spray, fov);
    let ff = desired.sigma_dot.push(0.0);
    let error = (desired.sigma - spray.sigma).push(fov_sigma_for_angle(theta_target) - fov.sigma);
    resolve(&j, &ff, &error, lambda2)
}

/// Mutable part of the controller carried between iterations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerState {
    pub active_mode: Option<Mode>,
    pub previous_mode: Option<Mode>,
    pub t_last_switch: f64,
    pub qdot_before_switch: JointVector,
    pub last_output: JointVector,
    pub blending: bool,
    pub last_t: Option<f64>,
}

/// Everything computed in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub qdot: JointVector,
    pub mode: Mode,
    /// True when this iteration changed the active mode.
    pub switched: bool,
    /// Blend weight applied to the new reference, when a blend is in progress.
    pub alpha: Option<f64>,
    /// `J_fov f1`, the FOV rate mode 1 would produce.
    pub fov_rate_mode1: f64,
    pub frame: TaskFrame,
    pub desired: DesiredSpray,
}

/// Mode selected by the tangent-cone test for the current approach and segment.
pub fn select_mode(
    config: &ControllerConfig,
    segment: SegmentKind,
    sigma_fov: f64,
    fov_rate_mode1: f64,
) -> Mode {
    if config.approach == Approach::St
        || (config.approach.standard_on_straights() && segment == SegmentKind::Straight)
    {
        return Mode::Standard;
    }
    let bounds = SetBounds {
        min: 0.0,
        max: config.switch_bound(),
    };
    if in_tangent_cone(fov_rate_mode1, sigma_fov, bounds) {
        Mode::Mode1
    } else {
        Mode::Mode2
    }
}

/// One control iteration at time `t` (pattern time) and configuration `q`.
pub fn step(
    chain: &Chain,
    t: f64,
    q: &JointVector,
    config: &ControllerConfig,
    state: &ControllerState,
    pattern: &dyn SprayPattern,
    surface: &dyn Surface,
) -> Result<(StepOutput, ControllerState), ControlError> {
    if let Some(last) = state.last_t {
        if t < last {
            return Err(ControlError::TimeReversal { t, last });
        }
    }
    let desired = pattern.desired(t, config.standoff)?;
    let frame = evaluate_tasks(chain, q, surface)?;
    let f1 = mode1_velocity(&frame.spray, &desired, &config.lambda1);
    let fov_rate_mode1 = (frame.fov.jacobian * f1)[0];

    let mode = select_mode(
        config,
        desired.segment.kind(),
        frame.fov.sigma,
        fov_rate_mode1,
    );
    let raw = match mode {
        Mode::Mode1 => f1,
        Mode::Mode2 => mode2_velocity(
            &frame.spray,
            &frame.fov,
            &desired,
            config.theta,
            &config.lambda2,
        ),
        Mode::Standard => mode2_velocity(&frame.spray, &frame.fov, &desired, 0.0, &config.lambda2),
    };

    let mut next = state.clone();
    let switched = state.active_mode.is_some_and(|m| m != mode);
    let mut alpha = None;
    let qdot = if config.approach.is_smooth() {
        if switched {
            next.qdot_before_switch = state.last_output;
            next.t_last_switch = t;
            next.blending = true;
        }
        if next.blending {
            let w = smoothing_alpha(
                t,
                next.t_last_switch,
                config.smoothing.a,
                config.smoothing.b,
            );
            if w > BLEND_COMPLETE {
                next.blending = false;
                raw
            } else {
                alpha = Some(w);
                next.qdot_before_switch * (1.0 - w) + raw * w
            }
        } else {
            raw
        }
    } else {
        raw
    };

    next.previous_mode = state.active_mode;
    next.active_mode = Some(mode);
    next.last_output = qdot;
    next.last_t = Some(t);

    Ok((
        StepOutput {
            qdot,
            mode,
            switched,
            alpha,
            fov_rate_mode1,
            frame,
            desired,
        },
        next,
    ))
}

/// Controller bundling the robot model, configuration and running state.
#[derive(Debug, Clone)]
pub struct Controller {
    chain: Chain,
    config: ControllerConfig,
    state: ControllerState,
}

impl Controller {
    pub fn new(chain: Chain, config: ControllerConfig) -> Result<Self, ControlError> {
        config.validate()?;
        Ok(Self {
            chain,
            config,
            state: ControllerState::default(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn reset(&mut self) {
        self.state = ControllerState::default();
    }

    pub fn step(
        &mut self,
        t: f64,
        q: &JointVector,
        pattern: &dyn SprayPattern,
        surface: &dyn Surface,
    ) -> Result<StepOutput, ControlError> {
        let (out, next) = step(
            &self.chain,
            t,
            q,
            &self.config,
            &self.state,
            pattern,
            surface,
        )?;
        self.state = next;
        Ok(out)
    }
}
