//! Operational-space tasks: end-effector position, nozzle field of view, and the
//! spray task (intersection point plus stand-off distance along the nozzle ray).

pub mod surface;

use nalgebra::{Matrix3x6, RowVector6, Vector2, Vector3};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, Chain, JointVector, KinematicSnapshot};
pub use surface::{
    FiniteDifferenceSurface, Flat, Paraboloid, Surface, SurfaceError, SurfaceRegistry, SurfaceSpec,
};

/// Search range along the nozzle ray (m).
pub const DEFAULT_MAX_RAY_DISTANCE: f64 = 5.0;
/// Regularization added to the FOV Jacobian denominator.
pub const FOV_EPSILON: f64 = 1e-9;
/// Below this `|N . a|` the ray runs parallel to the tangent plane.
pub const DEGENERATE_TANGENT_TOLERANCE: f64 = 1e-9;

const ROOT_TOLERANCE: f64 = 1e-12;
const BRACKET_SAMPLES: usize = 256;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("nozzle ray does not reach the surface within {max_distance} m")]
    NoIntersection { max_distance: f64 },
    #[error("nozzle ray is parallel to the tangent plane (|N.a| = {0:.3e})")]
    DegenerateTangent(f64),
}

/// Where the nozzle ray meets the surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionResult {
    /// Distance along the ray (m).
    pub k_bar: f64,
    /// `(x_i, y_i)`.
    pub point: Vector2<f64>,
    /// `h(x_i, y_i)`.
    pub z: f64,
    /// Unnormalized normal `(-dh/dx, -dh/dy, 1)` at the intersection.
    pub normal: Vector3<f64>,
}

impl IntersectionResult {
    pub fn point3(&self) -> Vector3<f64> {
        Vector3::new(self.point.x, self.point.y, self.z)
    }

    /// Desired nozzle direction `-N / |N|`.
    pub fn anti_normal(&self) -> Vector3<f64> {
        -self.normal.normalize()
    }
}

/// Residual of the ray/surface equation at distance `k`.
fn ray_residual(surface: &dyn Surface, origin: &Vector3<f64>, dir: &Vector3<f64>, k: f64) -> f64 {
    origin.z + dir.z * k - surface.height(origin.x + dir.x * k, origin.y + dir.y * k)
}

pub fn intersect_ray(
    surface: &dyn Surface,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Result<IntersectionResult, TaskError> {
    intersect_ray_within(surface, origin, dir, DEFAULT_MAX_RAY_DISTANCE)
}

/// Nearest root of the ray residual on `[0, max_distance]`: the first sign change on a
/// uniform grid is bracketed, then refined by Newton steps that fall back to bisection
/// whenever they leave the bracket.
pub fn intersect_ray_within(
    surface: &dyn Surface,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    max_distance: f64,
) -> Result<IntersectionResult, TaskError> {
    let g = |k: f64| ray_residual(surface, origin, dir, k);
    let no_hit = TaskError::NoIntersection { max_distance };

    let mut lo = 0.0;
    let mut g_lo = g(lo);
    let mut bracket = None;
    if g_lo == 0.0 {
        bracket = Some((0.0, 0.0, 0.0));
    } else {
        for i in 1..=BRACKET_SAMPLES {
            let hi = max_distance * i as f64 / BRACKET_SAMPLES as f64;
            let g_hi = g(hi);
            if g_hi == 0.0 || g_hi.signum() != g_lo.signum() {
                bracket = Some((lo, hi, g_lo));
                break;
            }
            lo = hi;
            g_lo = g_hi;
        }
    }
    let (mut lo, mut hi, g_lo) = bracket.ok_or(no_hit)?;
    let lo_sign = g_lo.signum();

    let mut k = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gk = g(k);
        if gk.abs() < ROOT_TOLERANCE || hi - lo < 1e-15 {
            break;
        }
        if gk.signum() == lo_sign {
            lo = k;
        } else {
            hi = k;
        }
        let (hx, hy) = surface.gradient(origin.x + dir.x * k, origin.y + dir.y * k);
        let slope = dir.z - hx * dir.x - hy * dir.y;
        let newton = k - gk / slope;
        k = if slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }

    let point = Vector2::new(origin.x + dir.x * k, origin.y + dir.y * k);
    let (hx, hy) = surface.gradient(point.x, point.y);
    Ok(IntersectionResult {
        k_bar: k,
        point,
        z: surface.height(point.x, point.y),
        normal: Vector3::new(-hx, -hy, 1.0),
    })
}

/// Scalar field-of-view task value and Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovTaskEval {
    /// `|a_des - a|`, in `[0, 2]`.
    pub sigma: f64,
    pub jacobian: RowVector6<f64>,
    pub desired: Vector3<f64>,
}

pub fn fov_task(
    snapshot: &KinematicSnapshot,
    desired: &Vector3<f64>,
    desired_jacobian: &Matrix3x6<f64>,
) -> FovTaskEval {
    let diff = desired - snapshot.fov;
    let sigma = diff.norm();
    let jacobian =
        diff.transpose() * (desired_jacobian - snapshot.fov_jacobian) / (sigma + FOV_EPSILON);
    FovTaskEval {
        sigma,
        jacobian,
        desired: *desired,
    }
}

/// Spray task `(x_i, y_i, k_bar)` with its tangent-plane Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SprayTaskEval {
    pub sigma: Vector3<f64>,
    pub jacobian: Matrix3x6<f64>,
    /// Rate of the distance to the tangent plane at the intersection point.
    pub distance_jacobian: RowVector6<f64>,
    pub intersection: IntersectionResult,
}

pub fn spray_task(
    snapshot: &KinematicSnapshot,
    surface: &dyn Surface,
) -> Result<SprayTaskEval, TaskError> {
    let hit = intersect_ray(surface, &snapshot.position, &snapshot.fov)?;
    spray_task_at(snapshot, hit)
}

/// Assembles the spray task from an intersection already computed for `snapshot`.
pub fn spray_task_at(
    snapshot: &KinematicSnapshot,
    hit: IntersectionResult,
) -> Result<SprayTaskEval, TaskError> {
    let n = hit.normal;
    let a = snapshot.fov;
    let b = n.dot(&a);
    if b.abs() < DEGENERATE_TANGENT_TOLERANCE {
        return Err(TaskError::DegenerateTangent(b.abs()));
    }
    // numerator of the tangent-plane distance, n . (p_e - p_i)
    let offset = n.dot(&(snapshot.position - hit.point3()));
    let n_t = n.transpose();
    let distance_jacobian = -(n_t * snapshot.position_jacobian) / b
        + (n_t * snapshot.fov_jacobian) * (offset / (b * b));

    let k = hit.k_bar;
    let mut jacobian = Matrix3x6::zeros();
    for row in 0..2 {
        let r = snapshot.position_jacobian.row(row)
            + snapshot.fov_jacobian.row(row) * k
            + distance_jacobian * a[row];
        jacobian.set_row(row, &r);
    }
    jacobian.set_row(2, &distance_jacobian);

    Ok(SprayTaskEval {
        sigma: Vector3::new(hit.point.x, hit.point.y, k),
        jacobian,
        distance_jacobian,
        intersection: hit,
    })
}

pub fn position_task(snapshot: &KinematicSnapshot) -> (Vector3<f64>, Matrix3x6<f64>) {
    (snapshot.position, snapshot.position_jacobian)
}

/// Desired nozzle direction `-N/|N|` and its derivative over `q`.
///
/// Constant-normal surfaces yield an exact zero derivative; otherwise the derivative is
/// taken by central differences through the full intersection.
pub fn desired_fov(
    chain: &Chain,
    q: &JointVector,
    surface: &dyn Surface,
    hit: &IntersectionResult,
) -> Result<(Vector3<f64>, Matrix3x6<f64>), TaskError> {
    let desired = hit.anti_normal();
    let mut jacobian = Matrix3x6::zeros();
    if surface.has_constant_normal() {
        return Ok((desired, jacobian));
    }
    let anti_normal_at = |q: &JointVector| -> Result<Vector3<f64>, TaskError> {
        let snap = forward_kinematics(chain, q);
        Ok(intersect_ray(surface, &snap.position, &snap.fov)?.anti_normal())
    };
    for i in 0..6 {
        let mut qp = *q;
        let mut qm = *q;
        qp[i] += FD_STEP;
        qm[i] -= FD_STEP;
        let col = (anti_normal_at(&qp)? - anti_normal_at(&qm)?) / (2.0 * FD_STEP);
        jacobian.set_column(i, &col);
    }
    Ok((desired, jacobian))
}

/// All task quantities the controller needs at one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskFrame {
    pub snapshot: KinematicSnapshot,
    pub spray: SprayTaskEval,
    pub fov: FovTaskEval,
}

pub fn evaluate_tasks(
    chain: &Chain,
    q: &JointVector,
    surface: &dyn Surface,
) -> Result<TaskFrame, TaskError> {
    let snapshot = forward_kinematics(chain, q);
    let spray = spray_task(&snapshot, surface)?;
    let (desired, desired_jacobian) = desired_fov(chain, q, surface, &spray.intersection)?;
    let fov = fov_task(&snapshot, &desired, &desired_jacobian);
    Ok(TaskFrame {
        snapshot,
        spray,
        fov,
    })
}

/// `sqrt(2 (1 - cos angle))`: the FOV task value for a misalignment `angle` (rad).
pub fn fov_sigma_for_angle(angle: f64) -> f64 {
    (2.0 * (1.0 - angle.cos())).max(0.0).sqrt()
}

/// Inverse of [`fov_sigma_for_angle`] on `[0, 2]`; returns radians.
pub fn fov_angle_for_sigma(sigma: f64) -> f64 {
    (1.0 - 0.5 * sigma * sigma).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::place_tool;
    use approx::assert_relative_eq;

    fn snapshot_at(p: Vector3<f64>, a: Vector3<f64>) -> KinematicSnapshot {
        KinematicSnapshot {
            position: p,
            fov: a,
            position_jacobian: Matrix3x6::zeros(),
            fov_jacobian: Matrix3x6::zeros(),
        }
    }

    #[test]
    fn vertical_ray_onto_plane() {
        let hit = intersect_ray(
            &Flat { c: -0.45 },
            &Vector3::new(0.4, -0.5, -0.15),
            &Vector3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        assert_relative_eq!(hit.k_bar, 0.3, epsilon = 1e-12);
        assert_relative_eq!(hit.point, Vector2::new(0.4, -0.5), epsilon = 1e-12);
        assert_eq!(hit.normal, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn vertical_ray_onto_paraboloid() {
        let hit = intersect_ray(
            &Paraboloid::default(),
            &Vector3::new(0.5, 0.0, -0.1),
            &Vector3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        assert_relative_eq!(hit.k_bar, 0.3, epsilon = 1e-12);
        assert_relative_eq!(hit.z, -0.4, epsilon = 1e-12);
        assert_relative_eq!(hit.normal, Vector3::new(0.0, -0.2, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn tilted_ray_onto_plane() {
        let t = 30f64.to_radians();
        let hit = intersect_ray(
            &Flat { c: 0.0 },
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(t.sin(), 0.0, -t.cos()),
        )
        .unwrap();
        assert_relative_eq!(hit.k_bar, 1.0 / t.cos(), epsilon = 1e-12);
        assert_relative_eq!(hit.k_bar, 1.1547005383792517, epsilon = 1e-12);
    }

    #[test]
    fn ray_pointing_away_misses() {
        let err = intersect_ray(
            &Flat { c: -0.45 },
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap_err();
        assert_eq!(err, TaskError::NoIntersection { max_distance: 5.0 });
    }

    #[test]
    fn nearest_root_wins() {
        // the ray crosses z = sin(4x) - 0.2 several times along +x
        let s = FiniteDifferenceSurface::new(|x: f64, _y| (4.0 * x).sin() * 0.5 - 0.2);
        let dir = Vector3::new(1.0, 0.0, -0.1).normalize();
        let origin = Vector3::new(0.0, 0.0, 0.0);
        let hit = intersect_ray(&s, &origin, &dir).unwrap();
        let residual = ray_residual(&s, &origin, &dir, hit.k_bar);
        assert!(residual.abs() < 1e-9);
        // no earlier crossing on a fine grid
        let mut k = 0.0;
        while k < hit.k_bar - 1e-6 {
            assert!(ray_residual(&s, &origin, &dir, k) > 0.0);
            k += 1e-4;
        }
    }

    #[test]
    fn aligned_fov_is_zero_and_finite() {
        let mut snap = snapshot_at(Vector3::zeros(), Vector3::new(0.0, 0.0, -1.0));
        snap.fov_jacobian = Matrix3x6::from_fn(|r, c| (r + c) as f64);
        let eval = fov_task(&snap, &Vector3::new(0.0, 0.0, -1.0), &Matrix3x6::zeros());
        assert_eq!(eval.sigma, 0.0);
        assert!(eval.jacobian.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn antipodal_fov_is_two() {
        let snap = snapshot_at(Vector3::zeros(), Vector3::new(0.0, 0.0, -1.0));
        let eval = fov_task(&snap, &Vector3::new(0.0, 0.0, 1.0), &Matrix3x6::zeros());
        assert_relative_eq!(eval.sigma, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn fov_of_twenty_degrees() {
        let t = 20f64.to_radians();
        let snap = snapshot_at(Vector3::zeros(), Vector3::new(t.sin(), 0.0, -t.cos()));
        let eval = fov_task(&snap, &Vector3::new(0.0, 0.0, -1.0), &Matrix3x6::zeros());
        assert_relative_eq!(eval.sigma, 0.347296355333861, epsilon = 1e-12);
        assert_relative_eq!(eval.sigma, fov_sigma_for_angle(t), epsilon = 1e-12);
        assert_relative_eq!(fov_angle_for_sigma(eval.sigma), t, epsilon = 1e-12);
    }

    #[test]
    fn spray_task_reads_off_intersection() {
        let snap = snapshot_at(Vector3::new(0.4, -0.5, -0.15), Vector3::new(0.0, 0.0, -1.0));
        let eval = spray_task(&snap, &Flat { c: -0.45 }).unwrap();
        assert_relative_eq!(eval.sigma, Vector3::new(0.4, -0.5, 0.3), epsilon = 1e-12);
    }

    #[test]
    fn parallel_ray_is_degenerate() {
        let snap = snapshot_at(Vector3::new(0.0, 0.0, -0.45), Vector3::new(1.0, 0.0, 0.0));
        let hit = IntersectionResult {
            k_bar: 0.0,
            point: Vector2::zeros(),
            z: -0.45,
            normal: Vector3::z(),
        };
        assert!(matches!(
            spray_task_at(&snap, hit),
            Err(TaskError::DegenerateTangent(_))
        ));
    }

    fn spray_sigma(chain: &Chain, q: &JointVector, surface: &dyn Surface) -> Vector3<f64> {
        let snap = forward_kinematics(chain, q);
        let hit = intersect_ray(surface, &snap.position, &snap.fov).unwrap();
        Vector3::new(hit.point.x, hit.point.y, hit.k_bar)
    }

    fn tilted_pose(chain: &Chain) -> JointVector {
        let seed = JointVector::from_row_slice(&[0.0, -1.2, 1.6, -1.9, -1.57, 0.0]);
        let dir = Vector3::new(0.2, -0.1, -1.0);
        place_tool(chain, &Vector3::new(0.1, -0.45, -0.15), &dir, &seed).unwrap()
    }

    #[test]
    fn spray_jacobian_matches_exact_differences() {
        let chain = Chain::ur5();
        let q = tilted_pose(&chain);
        for surface in [&Flat { c: -0.45 } as &dyn Surface, &Paraboloid::default()] {
            let eval = spray_task(&forward_kinematics(&chain, &q), surface).unwrap();
            for i in 0..6 {
                let mut qp = q;
                let mut qm = q;
                qp[i] += FD_STEP;
                qm[i] -= FD_STEP;
                let fd = (spray_sigma(&chain, &qp, surface) - spray_sigma(&chain, &qm, surface))
                    / (2.0 * FD_STEP);
                let col = eval.jacobian.column(i);
                assert!(
                    (fd - col).norm() <= 1e-4 * col.norm().max(1e-3),
                    "column {i}: {fd} vs {col}"
                );
            }
        }
    }

    #[test]
    fn flat_distance_jacobian_is_exact() {
        let chain = Chain::ur5();
        let q = tilted_pose(&chain);
        let surface = Flat { c: -0.45 };
        let eval = spray_task(&forward_kinematics(&chain, &q), &surface).unwrap();
        for i in 0..6 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += FD_STEP;
            qm[i] -= FD_STEP;
            let fd = (spray_sigma(&chain, &qp, &surface).z - spray_sigma(&chain, &qm, &surface).z)
                / (2.0 * FD_STEP);
            assert!((fd - eval.distance_jacobian[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fov_jacobian_matches_differences_on_curved_surface() {
        let chain = Chain::ur5();
        let q = tilted_pose(&chain);
        let surface = Paraboloid::default();
        let frame = evaluate_tasks(&chain, &q, &surface).unwrap();
        let sigma_at = |q: &JointVector| evaluate_tasks(&chain, q, &surface).unwrap().fov.sigma;
        let h = 1e-5;
        for i in 0..6 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (sigma_at(&qp) - sigma_at(&qm)) / (2.0 * h);
            assert!(
                (fd - frame.fov.jacobian[i]).abs() < 1e-5 * fd.abs().max(1.0),
                "{i}: {fd} vs {}",
                frame.fov.jacobian[i]
            );
        }
    }

    #[test]
    fn position_task_passes_through() {
        let chain = Chain::ur5();
        let snap = chain.forward(&JointVector::zeros());
        let (p, j) = position_task(&snap);
        assert_eq!(p, snap.position);
        assert_eq!(j, snap.position_jacobian);
        assert_relative_eq!(p, Vector3::new(-0.817, -0.191, -0.006), epsilon = 1e-12);
    }
}
