//! Denavit-Hartenberg forward kinematics for a six-joint serial arm and the
//! pseudoinverse machinery used for closed-loop velocity resolution.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector, Matrix3x6, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Joint-space vector of the six revolute joints (rad or rad/s).
pub type JointVector = Vector6<f64>;

/// Singular values below this are damped instead of inverted.
pub const DEFAULT_SINGULAR_TOLERANCE: f64 = 1e-4;
/// Damping factor applied to singular values below the tolerance.
pub const DEFAULT_DAMPING: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(
        "tool placement did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    PlacementFailed { iterations: usize, residual: f64 },
}

/// One row of a standard (distal) D-H table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    /// Link length (m).
    pub a: f64,
    /// Link twist (rad).
    pub alpha: f64,
    /// Link offset (m).
    pub d: f64,
    /// Constant added to the joint variable (rad).
    pub theta_offset: f64,
}

impl DhRow {
    pub const fn new(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
        }
    }

    /// A row that contributes the identity transform at zero joint angle.
    pub const fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    /// Homogeneous transform `Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)` for joint value `q`.
    pub fn transform(&self, q: f64) -> Matrix4<f64> {
        let (st, ct) = (q + self.theta_offset).sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        Matrix4::new(
            ct,
            -st * ca,
            st * sa,
            self.a * ct,
            st,
            ct * ca,
            -ct * sa,
            self.a * st,
            0.0,
            sa,
            ca,
            self.d,
            0.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Six-row serial chain. The default is the UR5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    rows: [DhRow; 6],
}

impl Chain {
    pub fn new(rows: [DhRow; 6]) -> Self {
        Self { rows }
    }

    /// Universal Robots UR5.
    pub fn ur5() -> Self {
        Self::new([
            DhRow::new(0.0, FRAC_PI_2, 0.089, 0.0),
            DhRow::new(-0.425, 0.0, 0.0, 0.0),
            DhRow::new(-0.392, 0.0, 0.0, 0.0),
            DhRow::new(0.0, FRAC_PI_2, 0.109, 0.0),
            DhRow::new(0.0, -FRAC_PI_2, 0.095, 0.0),
            DhRow::new(0.0, 0.0, 0.082, 0.0),
        ])
    }

    pub fn rows(&self) -> &[DhRow; 6] {
        &self.rows
    }

    pub fn forward(&self, q: &JointVector) -> KinematicSnapshot {
        forward_kinematics(self, q)
    }
}

impl Default for Chain {
    fn default() -> Self {
        Self::ur5()
    }
}

/// Joint angles (unwrapped) and joint velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState {
    pub q: JointVector,
    pub qdot: JointVector,
}

impl JointState {
    pub fn at_rest(q: JointVector) -> Self {
        Self {
            q,
            qdot: JointVector::zeros(),
        }
    }
}

/// End-effector position and nozzle direction with their Jacobians at one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSnapshot {
    /// Origin of the last frame in base coordinates (m).
    pub position: Vector3<f64>,
    /// z-axis of the last frame in base coordinates (unit vector).
    pub fov: Vector3<f64>,
    /// d(position)/dq.
    pub position_jacobian: Matrix3x6<f64>,
    /// d(fov)/dq.
    pub fov_jacobian: Matrix3x6<f64>,
}

/// Forward kinematics with analytic (geometric) Jacobians.
///
/// Column `i` of the position Jacobian is `z_{i-1} x (p_e - p_{i-1})` and column `i` of
/// the direction Jacobian is `z_{i-1} x a`, where `z_{i-1}` and `p_{i-1}` are the axis and
/// origin of the frame preceding joint `i`.
pub fn forward_kinematics(chain: &Chain, q: &JointVector) -> KinematicSnapshot {
    let mut frame = Matrix4::<f64>::identity();
    let mut axes = [Vector3::zeros(); 6];
    let mut origins = [Vector3::zeros(); 6];
    for (i, row) in chain.rows.iter().enumerate() {
        axes[i] = frame.fixed_view::<3, 1>(0, 2).into_owned();
        origins[i] = frame.fixed_view::<3, 1>(0, 3).into_owned();
        frame *= row.transform(q[i]);
    }
    let position: Vector3<f64> = frame.fixed_view::<3, 1>(0, 3).into_owned();
    let fov: Vector3<f64> = frame.fixed_view::<3, 1>(0, 2).into_owned();

    let mut position_jacobian = Matrix3x6::zeros();
    let mut fov_jacobian = Matrix3x6::zeros();
    for i in 0..6 {
        position_jacobian.set_column(i, &axes[i].cross(&(position - origins[i])));
        fov_jacobian.set_column(i, &axes[i].cross(&fov));
    }
    KinematicSnapshot {
        position,
        fov,
        position_jacobian,
        fov_jacobian,
    }
}

/// Moore-Penrose pseudoinverse via SVD with damping of small singular values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoInverse {
    pub singular_tolerance: f64,
    pub damping: f64,
}

impl Default for PseudoInverse {
    fn default() -> Self {
        Self {
            singular_tolerance: DEFAULT_SINGULAR_TOLERANCE,
            damping: DEFAULT_DAMPING,
        }
    }
}

impl PseudoInverse {
    pub fn compute(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        let (rows, cols) = j.shape();
        if rows == 0 || cols == 0 {
            return DMatrix::zeros(cols, rows);
        }
        let svd = j.clone().svd(true, true);
        let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
            unreachable!("svd requested with both factors");
        };
        let lambda_sq = self.damping * self.damping;
        let inv_singular = svd.singular_values.map(|s| {
            if s < self.singular_tolerance {
                s / (s * s + lambda_sq)
            } else {
                1.0 / s
            }
        });
        v_t.transpose() * DMatrix::from_diagonal(&inv_singular) * u.transpose()
    }
}

/// Pseudoinverse with the default damping parameters.
pub fn pseudoinverse(j: &DMatrix<f64>) -> DMatrix<f64> {
    PseudoInverse::default().compute(j)
}

/// Closed-loop inverse kinematics: `J^+ (sigma_des_dot + Lambda * sigma_err)`.
pub fn clik_velocity(
    jacobian: &DMatrix<f64>,
    sigma_des_dot: &DVector<f64>,
    sigma_err: &DVector<f64>,
    gain: &DMatrix<f64>,
) -> Result<JointVector, KinematicsError> {
    let m = jacobian.nrows();
    if jacobian.ncols() != 6 {
        return Err(KinematicsError::Dimension(format!(
            "jacobian has {} columns, expected 6",
            jacobian.ncols()
        )));
    }
    if sigma_des_dot.len() != m || sigma_err.len() != m {
        return Err(KinematicsError::Dimension(format!(
            "task vectors have lengths {} and {}, jacobian has {m} rows",
            sigma_des_dot.len(),
            sigma_err.len()
        )));
    }
    if gain.shape() != (m, m) {
        return Err(KinematicsError::Dimension(format!(
            "gain is {}x{}, expected {m}x{m}",
            gain.nrows(),
            gain.ncols()
        )));
    }
    let reference = sigma_des_dot + gain * sigma_err;
    let qdot = pseudoinverse(jacobian) * reference;
    Ok(JointVector::from_column_slice(qdot.as_slice()))
}

/// Damped least-squares placement of the tool: drives the end effector to `position`
/// with its nozzle along `direction`, starting from `seed`.
pub fn place_tool(
    chain: &Chain,
    position: &Vector3<f64>,
    direction: &Vector3<f64>,
    seed: &JointVector,
) -> Result<JointVector, KinematicsError> {
    const MAX_ITERATIONS: usize = 500;
    const DAMPING: f64 = 1e-2;
    const STEP_LIMIT: f64 = 0.2;
    let direction = direction.normalize();
    let mut q = *seed;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let snap = forward_kinematics(chain, &q);
        let mut error = Vector6::zeros();
        error
            .fixed_rows_mut::<3>(0)
            .copy_from(&(position - snap.position));
        error
            .fixed_rows_mut::<3>(3)
            .copy_from(&(direction - snap.fov));
        residual = error.norm();
        if residual < 1e-12 {
            return Ok(q);
        }
        let mut jac = Matrix6::zeros();
        jac.fixed_rows_mut::<3>(0)
            .copy_from(&snap.position_jacobian);
        jac.fixed_rows_mut::<3>(3).copy_from(&snap.fov_jacobian);
        let jjt = jac * jac.transpose() + Matrix6::identity() * (DAMPING * DAMPING);
        let Some(solved) = jjt.lu().solve(&error) else {
            break;
        };
        let mut step = jac.transpose() * solved;
        let len = step.norm();
        if len > STEP_LIMIT {
            step *= STEP_LIMIT / len;
        }
        q += step;
    }
    Err(KinematicsError::PlacementFailed {
        iterations: MAX_ITERATIONS,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    type Mat4 = [[f64; 4]; 4];

    // Plain-array transform chain, kept independent of nalgebra.
    fn dh_array(a: f64, alpha: f64, d: f64, theta: f64) -> Mat4 {
        let (st, ct) = (theta.sin(), theta.cos());
        let (sa, ca) = (alpha.sin(), alpha.cos());
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    fn mul(x: &Mat4, y: &Mat4) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = (0..4).map(|k| x[i][k] * y[k][j]).sum();
            }
        }
        out
    }

    fn brute_force(q: [f64; 6]) -> ([f64; 3], [f64; 3]) {
        let table = [
            (0.0, FRAC_PI_2, 0.089),
            (-0.425, 0.0, 0.0),
            (-0.392, 0.0, 0.0),
            (0.0, FRAC_PI_2, 0.109),
            (0.0, -FRAC_PI_2, 0.095),
            (0.0, 0.0, 0.082),
        ];
        let mut t = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for (i, (a, alpha, d)) in table.iter().enumerate() {
            t = mul(&t, &dh_array(*a, *alpha, *d, q[i]));
        }
        ([t[0][3], t[1][3], t[2][3]], [t[0][2], t[1][2], t[2][2]])
    }

    #[test]
    fn zero_pose_matches_transform_chain() {
        let snap = Chain::ur5().forward(&JointVector::zeros());
        let (p, a) = brute_force([0.0; 6]);
        for i in 0..3 {
            assert_relative_eq!(snap.position[i], p[i], epsilon = 1e-12);
            assert_relative_eq!(snap.fov[i], a[i], epsilon = 1e-12);
        }
        // hand-evaluated: arm stretched along -x, tool pointing along -y
        assert_relative_eq!(
            snap.position,
            Vector3::new(-0.817, -0.191, -0.006),
            epsilon = 1e-12
        );
        assert_relative_eq!(snap.fov, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn random_poses_match_transform_chain() {
        let qs = [
            [0.3, -1.2, 1.4, -1.7, -1.5, 0.2],
            [-2.0, 0.4, -0.9, 2.2, 0.7, -3.0],
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        ];
        for q in qs {
            let snap = Chain::ur5().forward(&JointVector::from_row_slice(&q));
            let (p, a) = brute_force(q);
            for i in 0..3 {
                assert_relative_eq!(snap.position[i], p[i], epsilon = 1e-12);
                assert_relative_eq!(snap.fov[i], a[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_link_reads_base_offset() {
        let mut rows = [DhRow::identity(); 6];
        rows[0] = Chain::ur5().rows()[0];
        let snap = Chain::new(rows).forward(&JointVector::zeros());
        assert_relative_eq!(
            snap.position,
            Vector3::new(0.0, 0.0, 0.089),
            epsilon = 1e-15
        );
    }

    #[test]
    fn jacobians_match_central_differences() {
        let chain = Chain::ur5();
        let q = JointVector::from_row_slice(&[0.4, -1.1, 1.3, -1.8, -1.6, 0.5]);
        let snap = chain.forward(&q);
        let h = 1e-6;
        for i in 0..6 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let (fp, fm) = (chain.forward(&qp), chain.forward(&qm));
            let dp = (fp.position - fm.position) / (2.0 * h);
            let da = (fp.fov - fm.fov) / (2.0 * h);
            assert!((dp - snap.position_jacobian.column(i)).norm() < 1e-8);
            assert!((da - snap.fov_jacobian.column(i)).norm() < 1e-8);
        }
    }

    #[test]
    fn pseudoinverse_of_selector_is_its_transpose() {
        let mut j = DMatrix::zeros(3, 6);
        j.view_mut((0, 0), (3, 3)).fill_with_identity();
        let pinv = pseudoinverse(&j);
        assert_relative_eq!(pinv, j.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn pseudoinverse_of_zero_is_zero() {
        let pinv = pseudoinverse(&DMatrix::zeros(3, 6));
        assert_eq!(pinv.shape(), (6, 3));
        assert!(pinv.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn near_singular_rows_are_damped() {
        let mut j = DMatrix::zeros(2, 6);
        j[(0, 0)] = 1.0;
        j[(1, 1)] = 1e-6;
        let pinv = pseudoinverse(&j);
        assert_relative_eq!(pinv[(0, 0)], 1.0, epsilon = 1e-14);
        // 1e-6 / (1e-12 + 1e-6) instead of 1e6
        assert_relative_eq!(pinv[(1, 1)], 1e-6 / (1e-12 + 1e-6), epsilon = 1e-12);
    }

    #[test]
    fn clik_is_zero_at_equilibrium() {
        let j = DMatrix::from_fn(3, 6, |r, c| (r * 6 + c) as f64 * 0.1 + 0.3);
        let qdot = clik_velocity(
            &j,
            &DVector::zeros(3),
            &DVector::zeros(3),
            &(DMatrix::identity(3, 3) * 0.4),
        )
        .unwrap();
        assert_eq!(qdot, JointVector::zeros());
    }

    #[test]
    fn clik_decoupled_axis() {
        let mut j = DMatrix::zeros(3, 6);
        j.view_mut((0, 0), (3, 3)).fill_with_identity();
        let qdot = clik_velocity(
            &j,
            &DVector::zeros(3),
            &DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            &(DMatrix::identity(3, 3) * 0.4),
        )
        .unwrap();
        assert_relative_eq!(
            qdot,
            JointVector::from_row_slice(&[0.4, 0.0, 0.0, 0.0, 0.0, 0.0]),
            epsilon = 1e-14
        );
    }

    #[test]
    fn clik_rejects_mismatched_dimensions() {
        let j = DMatrix::zeros(3, 6);
        let err = clik_velocity(
            &j,
            &DVector::zeros(4),
            &DVector::zeros(3),
            &DMatrix::identity(3, 3),
        );
        assert!(matches!(err, Err(KinematicsError::Dimension(_))));
        let err = clik_velocity(
            &DMatrix::zeros(3, 5),
            &DVector::zeros(3),
            &DVector::zeros(3),
            &DMatrix::identity(3, 3),
        );
        assert!(matches!(err, Err(KinematicsError::Dimension(_))));
        let err = clik_velocity(
            &j,
            &DVector::zeros(3),
            &DVector::zeros(3),
            &DMatrix::identity(4, 4),
        );
        assert!(matches!(err, Err(KinematicsError::Dimension(_))));
    }

    #[test]
    fn place_tool_reaches_target() {
        let chain = Chain::ur5();
        let seed = JointVector::from_row_slice(&[0.0, -1.2, 1.6, -1.9, -1.57, 0.0]);
        let target = Vector3::new(0.1, -0.45, -0.15);
        let down = Vector3::new(0.0, 0.0, -1.0);
        let q = place_tool(&chain, &target, &down, &seed).unwrap();
        let snap = chain.forward(&q);
        assert!((snap.position - target).norm() < 1e-10);
        assert!((snap.fov - down).norm() < 1e-10);
    }
}
