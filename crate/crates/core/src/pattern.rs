//! Lawn-mower spray pattern parametrized by arc length, and the desired spray-task
//! trajectory derived from it.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::Surface;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("time {t} s is outside the pattern duration [0, {duration}] s")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid pattern: {0}")]
    Invalid(String),
}

/// Which branch of the pattern a point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Straight1,
    Turn1,
    Straight2,
    Turn2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Straight,
    Turn,
}

impl Segment {
    pub fn kind(self) -> SegmentKind {
        match self {
            Segment::Straight1 | Segment::Straight2 => SegmentKind::Straight,
            Segment::Turn1 | Segment::Turn2 => SegmentKind::Turn,
        }
    }
}

/// Desired spray-task value and feedforward at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesiredSpray {
    /// `(x_spray, y_spray, k_bar_des)`.
    pub sigma: Vector3<f64>,
    /// `(dx_spray/dt, dy_spray/dt, 0)`.
    pub sigma_dot: Vector3<f64>,
    pub segment: Segment,
}

/// Any spray pattern given as a function of time.
pub trait SprayPattern: Send + Sync + fmt::Debug {
    /// Pattern time span in seconds.
    fn duration(&self) -> f64;

    fn desired(&self, t: f64, standoff: f64) -> Result<DesiredSpray, PatternError>;
}

/// Racetrack of two straights of length `length` joined by half circles of radius
/// `radius`, traversed `laps` times at surface speed `speed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawnMowerPattern {
    pub length: f64,
    pub radius: f64,
    pub x0: f64,
    pub y0: f64,
    pub speed: f64,
    pub laps: u32,
}

pub const DEFAULT_LAPS: u32 = 2;

impl LawnMowerPattern {
    pub fn new(
        length: f64,
        radius: f64,
        x0: f64,
        y0: f64,
        speed: f64,
        laps: u32,
    ) -> Result<Self, PatternError> {
        let p = Self {
            length,
            radius,
            x0,
            y0,
            speed,
            laps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        let finite = [self.length, self.radius, self.x0, self.y0, self.speed]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PatternError::Invalid("non-finite parameter".into()));
        }
        // L = 0 is accepted so a pure circle can be expressed.
        if self.length < 0.0 || self.radius <= 0.0 || self.speed <= 0.0 || self.laps == 0 {
            return Err(PatternError::Invalid(format!(
                "need L >= 0, r > 0, U > 0, laps >= 1 (got L={}, r={}, U={}, laps={})",
                self.length, self.radius, self.speed, self.laps
            )));
        }
        Ok(())
    }

    pub fn with_speed(&self, speed: f64) -> Self {
        Self { speed, ..*self }
    }

    /// Arc length of one lap, `2L + 2 pi r`.
    pub fn lap_length(&self) -> f64 {
        2.0 * self.length + 2.0 * PI * self.radius
    }

    /// Total arc length over all laps.
    pub fn path_length(&self) -> f64 {
        self.laps as f64 * self.lap_length()
    }

    fn reduce(&self, s: f64) -> f64 {
        s.rem_euclid(self.lap_length())
    }

    pub fn segment_at(&self, s: f64) -> Segment {
        let (l, r) = (self.length, self.radius);
        let s = self.reduce(s);
        if s <= l {
            Segment::Straight1
        } else if s <= l + PI * r {
            Segment::Turn1
        } else if s <= 2.0 * l + PI * r {
            Segment::Straight2
        } else {
            Segment::Turn2
        }
    }

    pub fn segment_kind(&self, s: f64) -> SegmentKind {
        self.segment_at(s).kind()
    }

    /// Position on the surface plane and unit tangent at arc length `s`.
    pub fn at_arc_length(&self, s: f64) -> (Vector2<f64>, Vector2<f64>, Segment) {
        let (l, r, x0, y0) = (self.length, self.radius, self.x0, self.y0);
        let segment = self.segment_at(s);
        let s = self.reduce(s);
        let (pos, tangent) = match segment {
            Segment::Straight1 => (Vector2::new(s + x0, y0), Vector2::new(1.0, 0.0)),
            Segment::Turn1 => {
                let phi = (s - l) / r;
                (
                    Vector2::new(l + r * phi.sin() + x0, r * (1.0 - phi.cos()) + y0),
                    Vector2::new(phi.cos(), phi.sin()),
                )
            }
            Segment::Straight2 => (
                Vector2::new(l - (s - l - PI * r) + x0, 2.0 * r + y0),
                Vector2::new(-1.0, 0.0),
            ),
            Segment::Turn2 => {
                let phi = (s - 2.0 * l - PI * r) / r;
                (
                    Vector2::new(-r * phi.sin() + x0, 2.0 * r + r * (phi.cos() - 1.0) + y0),
                    Vector2::new(-phi.cos(), -phi.sin()),
                )
            }
        };
        (pos, tangent, segment)
    }

    /// Pattern lifted onto the surface, `(x, y, h(x, y))`.
    pub fn spatial(&self, surface: &dyn Surface, s: f64) -> Vector3<f64> {
        let (p, _, _) = self.at_arc_length(s);
        Vector3::new(p.x, p.y, surface.height(p.x, p.y))
    }

    pub fn eval(&self, t: f64, standoff: f64) -> Result<DesiredSpray, PatternError> {
        let duration = self.duration();
        if !(0.0..=duration).contains(&t) {
            return Err(PatternError::OutOfRange { t, duration });
        }
        let (pos, tangent, segment) = self.at_arc_length(self.speed * t);
        let vel = tangent * self.speed;
        Ok(DesiredSpray {
            sigma: Vector3::new(pos.x, pos.y, standoff),
            sigma_dot: Vector3::new(vel.x, vel.y, 0.0),
            segment,
        })
    }
}

impl SprayPattern for LawnMowerPattern {
    fn duration(&self) -> f64 {
        self.path_length() / self.speed
    }

    fn desired(&self, t: f64, standoff: f64) -> Result<DesiredSpray, PatternError> {
        self.eval(t, standoff)
    }
}

/// A pattern supplied as a closure `t -> (position, velocity, segment)`.
pub struct FnPattern<F> {
    duration: f64,
    f: F,
}

impl<F> FnPattern<F>
where
    F: Fn(f64) -> (Vector2<f64>, Vector2<f64>, Segment) + Send + Sync,
{
    pub fn new(duration: f64, f: F) -> Self {
        Self { duration, f }
    }
}

impl<F> fmt::Debug for FnPattern<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPattern")
            .field("duration", &self.duration)
            .finish_non_exhaustive()
    }
}

impl<F> SprayPattern for FnPattern<F>
where
    F: Fn(f64) -> (Vector2<f64>, Vector2<f64>, Segment) + Send + Sync,
{
    fn duration(&self) -> f64 {
        self.duration
    }

    fn desired(&self, t: f64, standoff: f64) -> Result<DesiredSpray, PatternError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(PatternError::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        let (p, v, segment) = (self.f)(t);
        Ok(DesiredSpray {
            sigma: Vector3::new(p.x, p.y, standoff),
            sigma_dot: Vector3::new(v.x, v.y, 0.0),
            segment,
        })
    }
}
