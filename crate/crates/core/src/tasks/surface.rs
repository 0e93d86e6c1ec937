//! Height-field surfaces `z = h(x, y)` and a name-based registry for building them
//! from configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A spray surface given as a height field.
pub trait Surface: Send + Sync + fmt::Debug {
    fn height(&self, x: f64, y: f64) -> f64;

    /// `(dh/dx, dh/dy)`.
    fn gradient(&self, x: f64, y: f64) -> (f64, f64);

    /// True when the normal is the same everywhere, so `d(a_des)/dq` vanishes.
    fn has_constant_normal(&self) -> bool {
        false
    }
}

/// `h(x, y) = c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flat {
    pub c: f64,
}

impl Surface for Flat {
    fn height(&self, _x: f64, _y: f64) -> f64 {
        self.c
    }

    fn gradient(&self, _x: f64, _y: f64) -> (f64, f64) {
        (0.0, 0.0)
    }

    fn has_constant_normal(&self) -> bool {
        true
    }
}

/// `h(x, y) = curvature * (x - x_c)^2 + slope_y * y + offset`.
///
/// The default is `(x - 0.5)^2 + 0.2 y - 0.4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Paraboloid {
    pub curvature: f64,
    pub x_center: f64,
    pub slope_y: f64,
    pub offset: f64,
}

impl Default for Paraboloid {
    fn default() -> Self {
        Self {
            curvature: 1.0,
            x_center: 0.5,
            slope_y: 0.2,
            offset: -0.4,
        }
    }
}

impl Surface for Paraboloid {
    fn height(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.x_center;
        self.curvature * dx * dx + self.slope_y * y + self.offset
    }

    fn gradient(&self, x: f64, _y: f64) -> (f64, f64) {
        (2.0 * self.curvature * (x - self.x_center), self.slope_y)
    }
}

/// Wraps a bare height function and differentiates it numerically.
pub struct FiniteDifferenceSurface<F> {
    height: F,
    step: f64,
}

impl<F> FiniteDifferenceSurface<F>
where
    F: Fn(f64, f64) -> f64 + Send + Sync,
{
    pub fn new(height: F) -> Self {
        Self { height, step: 1e-6 }
    }

    pub fn with_step(height: F, step: f64) -> Self {
        Self { height, step }
    }
}

impl<F> fmt::Debug for FiniteDifferenceSurface<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteDifferenceSurface")
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl<F> Surface for FiniteDifferenceSurface<F>
where
    F: Fn(f64, f64) -> f64 + Send + Sync,
{
    fn height(&self, x: f64, y: f64) -> f64 {
        (self.height)(x, y)
    }

    fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let h = self.step;
        let dx = ((self.height)(x + h, y) - (self.height)(x - h, y)) / (2.0 * h);
        let dy = ((self.height)(x, y + h) - (self.height)(x, y - h)) / (2.0 * h);
        (dx, dy)
    }
}

/// Surface selection as it appears in experiment configs, e.g.
/// `{ kind = "flat", c = -0.45 }` or `{ kind = "paraboloid" }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, f64>,
}

impl SurfaceSpec {
    pub fn flat(c: f64) -> Self {
        Self {
            kind: "flat".into(),
            params: BTreeMap::from([("c".to_string(), c)]),
        }
    }

    pub fn paraboloid() -> Self {
        Self {
            kind: "paraboloid".into(),
            params: BTreeMap::new(),
        }
    }

    fn param(&self, name: &str, default: Option<f64>) -> Result<f64, SurfaceError> {
        match (self.params.get(name), default) {
            (Some(v), _) => Ok(*v),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(SurfaceError::MissingParameter {
                kind: self.kind.clone(),
                name: name.to_string(),
            }),
        }
    }
}

impl fmt::Display for SurfaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{", self.kind)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("unknown surface kind `{0}`")]
    UnknownKind(String),
    #[error("surface `{kind}` requires parameter `{name}`")]
    MissingParameter { kind: String, name: String },
}

type Builder = fn(&SurfaceSpec) -> Result<Arc<dyn Surface>, SurfaceError>;

/// Maps surface names to constructors.
#[derive(Clone)]
pub struct SurfaceRegistry {
    builders: BTreeMap<String, Builder>,
}

impl fmt::Debug for SurfaceRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.builders.keys()).finish()
    }
}

impl Default for SurfaceRegistry {
    fn default() -> Self {
        let mut registry = Self {
            builders: BTreeMap::new(),
        };
        registry.register("flat", |spec| {
            Ok(Arc::new(Flat {
                c: spec.param("c", None)?,
            }))
        });
        registry.register("paraboloid", |spec| {
            let d = Paraboloid::default();
            Ok(Arc::new(Paraboloid {
                curvature: spec.param("curvature", Some(d.curvature))?,
                x_center: spec.param("x_center", Some(d.x_center))?,
                slope_y: spec.param("slope_y", Some(d.slope_y))?,
                offset: spec.param("offset", Some(d.offset))?,
            }))
        });
        registry
    }
}

impl SurfaceRegistry {
    pub fn register(&mut self, kind: &str, builder: Builder) {
        self.builders.insert(kind.to_string(), builder);
    }

    pub fn build(&self, spec: &SurfaceSpec) -> Result<Arc<dyn Surface>, SurfaceError> {
        let builder = self
            .builders
            .get(&spec.kind)
            .ok_or_else(|| SurfaceError::UnknownKind(spec.kind.clone()))?;
        builder(spec)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }
}
