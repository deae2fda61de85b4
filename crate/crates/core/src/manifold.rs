//! SO(3) helpers and the composite state manifold used by the filter.
//!
//! The full state mixes rotations, vectors, scalars and a gravity direction;
//! its tangent space is a fixed 29-dimensional vector laid out as documented
//! on [`ErrorState`]. That layout is a frozen contract: every measurement
//! Jacobian column in this crate refers to it.

#[cfg(not(feature = "std"))]
use nalgebra::{ComplexField, RealField};
use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3, Vector4};

/// 3x3 rotation matrix. Kept as a plain matrix (not a quaternion) because
/// every consumer multiplies it against point sets.
pub type Rotation = Matrix3<f64>;

/// Tangent-space error vector, see [`blocks`] for the layout.
pub type ErrorState = SVector<f64, 29>;

/// Covariance over [`ErrorState`] coordinates.
pub type StateCovariance = SMatrix<f64, 29, 29>;

/// Tangent dimension of the composite state.
pub const STATE_DIM: usize = 29;

/// Column/row offsets of each state block inside [`ErrorState`].
///
/// Rotations use 3-vector axis-angle blocks, vectors and scalars are
/// additive, and gravity uses a 2-dof tangent on the sphere of constant
/// gravity magnitude (its norm is fixed by initialization, only the
/// direction is estimated).
pub mod blocks {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BIAS_GYRO: usize = 9;
    pub const BIAS_ACC: usize = 12;
    pub const GRAVITY: usize = 15; // 2 dof
    pub const ROT_EXT: usize = 17;
    pub const POS_EXT: usize = 20;
    pub const INV_EXPOSURE: usize = 23;
    pub const TIME_OFFSET: usize = 24;
    pub const INTRINSICS: usize = 25; // 4 dof: fx fy cx cy
}

const SMALL_ANGLE: f64 = 1e-7;

/// Skew-symmetric (cross-product) matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula. For angles below 1e-7 a second-order series is used
/// so the sin(t)/t terms stay well defined.
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        Matrix3::identity() + w + w * w * 0.5
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() + w * (theta.sin() / theta) + w * w * ((1.0 - theta.cos()) / theta2)
    }
}

/// Inverse of [`so3_exp`]; returns the axis-angle vector with norm <= pi.
///
/// Inputs are expected to satisfy the rotation invariants (orthonormal,
/// det +1); [`is_rotation`] is the matching validity test.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let trace = r.trace();
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let anti = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        return anti * 0.5;
    }
    if core::f64::consts::PI - theta > 1e-5 {
        return anti * (theta / (2.0 * theta.sin()));
    }
    // Near pi the antisymmetric part vanishes; extract the axis from the
    // largest diagonal entry of R + I (ties broken by first index).
    let m = r + Matrix3::identity();
    let mut k = 0;
    for i in 1..3 {
        if m[(i, i)] > m[(k, k)] {
            k = i;
        }
    }
    let col = m.column(k);
    let axis = Vector3::new(col[0], col[1], col[2]).normalize();
    // Fix the sign so that exp(log(R)) = R even for angles slightly below pi.
    let axis = if anti.dot(&axis) < 0.0 { -axis } else { axis };
    axis * theta
}

/// True when `r` is orthonormal with determinant +1 to `tol`.
pub fn is_rotation(r: &Rotation, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).norm();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Right Jacobian of SO(3): Exp(w + d) ~= Exp(w) Exp(Jr(w) d).
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() - w * 0.5 + w * w * (1.0 / 6.0);
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - w * ((1.0 - theta.cos()) / theta2)
        + w * w * ((theta - theta.sin()) / (theta2 * theta))
}

/// Inverse of the right Jacobian.
pub fn so3_right_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() + w * 0.5 + w * w * (1.0 / 12.0);
    }
    let theta = theta2.sqrt();
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + w * 0.5 + w * w * coeff
}

/// Orthonormal basis of the tangent plane perpendicular to `v` (3x2).
///
/// Deterministic in `v`; used both for the gravity manifold and for building
/// plane/texture frames. For a near-zero `v` a fixed basis is returned.
pub fn tangent_basis(v: &Vector3<f64>) -> SMatrix<f64, 3, 2> {
    let n = v.norm();
    if n < 1e-12 {
        return SMatrix::<f64, 3, 2>::from_columns(&[Vector3::x(), Vector3::y()]);
    }
    let unit = v / n;
    // Cross against the axis least aligned with v.
    let mut k = 0;
    for i in 1..3 {
        if unit[i].abs() < unit[k].abs() {
            k = i;
        }
    }
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    let b1 = unit.cross(&e).normalize();
    let b2 = unit.cross(&b1).normalize();
    SMatrix::<f64, 3, 2>::from_columns(&[b1, b2])
}

/// Rotate `g` by the tangent increment `d` (2-dof sphere retraction).
fn sphere_plus(g: &Vector3<f64>, d: &Vector2<f64>) -> Vector3<f64> {
    let b = tangent_basis(g);
    so3_exp(&(b * d)) * g
}

/// Tangent vector taking `g_ref` to `g` along the minimal rotation.
fn sphere_minus(g: &Vector3<f64>, g_ref: &Vector3<f64>) -> Vector2<f64> {
    let nr = g_ref.norm();
    let ng = g.norm();
    if nr < 1e-12 || ng < 1e-12 {
        return Vector2::zeros();
    }
    let cross = g_ref.cross(g);
    let cn = cross.norm();
    let angle = cn.atan2(g_ref.dot(g));
    if cn < 1e-15 {
        return Vector2::zeros();
    }
    let omega = cross * (angle / cn);
    tangent_basis(g_ref).transpose() * omega
}

/// The full estimator state: IMU pose and motion, IMU biases, gravity,
/// camera-IMU extrinsic, inverse exposure, camera time offset and pinhole
/// intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct FullState {
    pub rot_imu: Rotation,
    pub pos_imu: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_acc: Vector3<f64>,
    pub gravity: Vector3<f64>,
    pub rot_ext: Rotation,
    pub pos_ext: Vector3<f64>,
    /// Inverse camera exposure time (1/s); strictly positive.
    pub inv_exposure: f64,
    /// IMU-to-camera clock offset (s).
    pub time_offset: f64,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: Vector4<f64>,
}

impl Default for FullState {
    fn default() -> Self {
        Self {
            rot_imu: Rotation::identity(),
            pos_imu: Vector3::zeros(),
            vel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            bias_acc: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            rot_ext: Rotation::identity(),
            pos_ext: Vector3::zeros(),
            inv_exposure: 1000.0,
            time_offset: 0.0,
            intrinsics: Vector4::new(500.0, 500.0, 320.0, 240.0),
        }
    }
}

impl FullState {
    /// Retraction: apply the tangent increment `dx` to `self`.
    ///
    /// Rotation blocks compose on the right (`R * Exp(dtheta)`), gravity is
    /// retracted on its sphere, everything else adds.
    pub fn boxplus(&self, dx: &ErrorState) -> FullState {
        use blocks::*;
        let d3 = |off: usize| Vector3::new(dx[off], dx[off + 1], dx[off + 2]);
        FullState {
            rot_imu: self.rot_imu * so3_exp(&d3(ROT)),
            pos_imu: self.pos_imu + d3(POS),
            vel: self.vel + d3(VEL),
            bias_gyro: self.bias_gyro + d3(BIAS_GYRO),
            bias_acc: self.bias_acc + d3(BIAS_ACC),
            gravity: sphere_plus(
                &self.gravity,
                &Vector2::new(dx[GRAVITY], dx[GRAVITY + 1]),
            ),
            rot_ext: self.rot_ext * so3_exp(&d3(ROT_EXT)),
            pos_ext: self.pos_ext + d3(POS_EXT),
            inv_exposure: self.inv_exposure + dx[INV_EXPOSURE],
            time_offset: self.time_offset + dx[TIME_OFFSET],
            intrinsics: self.intrinsics
                + Vector4::new(
                    dx[INTRINSICS],
                    dx[INTRINSICS + 1],
                    dx[INTRINSICS + 2],
                    dx[INTRINSICS + 3],
                ),
        }
    }

    /// Local inverse of [`FullState::boxplus`]: the tangent vector at `rhs`
    /// pointing to `self`.
    pub fn boxminus(&self, rhs: &FullState) -> ErrorState {
        use blocks::*;
        let mut dx = ErrorState::zeros();
        let set3 = |dx: &mut ErrorState, off: usize, v: Vector3<f64>| {
            dx[off] = v.x;
            dx[off + 1] = v.y;
            dx[off + 2] = v.z;
        };
        set3(&mut dx, ROT, so3_log(&(rhs.rot_imu.transpose() * self.rot_imu)));
        set3(&mut dx, POS, self.pos_imu - rhs.pos_imu);
        set3(&mut dx, VEL, self.vel - rhs.vel);
        set3(&mut dx, BIAS_GYRO, self.bias_gyro - rhs.bias_gyro);
        set3(&mut dx, BIAS_ACC, self.bias_acc - rhs.bias_acc);
        let dg = sphere_minus(&self.gravity, &rhs.gravity);
        dx[GRAVITY] = dg.x;
        dx[GRAVITY + 1] = dg.y;
        set3(&mut dx, ROT_EXT, so3_log(&(rhs.rot_ext.transpose() * self.rot_ext)));
        set3(&mut dx, POS_EXT, self.pos_ext - rhs.pos_ext);
        dx[INV_EXPOSURE] = self.inv_exposure - rhs.inv_exposure;
        dx[TIME_OFFSET] = self.time_offset - rhs.time_offset;
        for i in 0..4 {
            dx[INTRINSICS + i] = self.intrinsics[i] - rhs.intrinsics[i];
        }
        dx
    }

    /// Jacobian of `(self boxplus d) boxminus reference` w.r.t. `d` at d = 0.
    ///
    /// Identity except on the rotation blocks (inverse right Jacobian of the
    /// relative rotation) and the gravity block (basis alignment). This is
    /// the prior-term linearization of the iterated update.
    pub fn boxminus_jacobian(&self, reference: &FullState) -> StateCovariance {
        use blocks::*;
        let mut j = StateCovariance::identity();
        let phi = so3_log(&(reference.rot_imu.transpose() * self.rot_imu));
        j.fixed_view_mut::<3, 3>(ROT, ROT)
            .copy_from(&so3_right_jacobian_inv(&phi));
        let phi_e = so3_log(&(reference.rot_ext.transpose() * self.rot_ext));
        j.fixed_view_mut::<3, 3>(ROT_EXT, ROT_EXT)
            .copy_from(&so3_right_jacobian_inv(&phi_e));
        let m = tangent_basis(&reference.gravity).transpose() * tangent_basis(&self.gravity);
        j.fixed_view_mut::<2, 2>(GRAVITY, GRAVITY).copy_from(&m);
        j
    }
}

/// Force exact symmetry on a covariance-like matrix.
pub fn symmetrize(m: &mut StateCovariance) {
    for i in 0..STATE_DIM {
        for k in (i + 1)..STATE_DIM {
            let v = 0.5 * (m[(i, k)] + m[(k, i)]);
            m[(i, k)] = v;
            m[(k, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use approx::assert_relative_eq;

    /// Truncated power-series evaluation of the matrix exponential,
    /// independent of the Rodrigues route.
    fn exp_series(omega: &Vector3<f64>, terms: usize) -> Matrix3<f64> {
        let w = skew(omega);
        let mut acc = Matrix3::identity();
        let mut term = Matrix3::identity();
        for n in 1..=terms {
            term = term * w / (n as f64);
            acc += term;
        }
        acc
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        assert_eq!(so3_exp(&Vector3::zeros()), Matrix3::identity());
        let r = so3_exp(&Vector3::new(0.0, 0.0, core::f64::consts::FRAC_PI_2));
        let v = r * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_power_series() {
        let mut rng = SeededRng::new(7);
        for _ in 0..200 {
            let dir = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
            let omega = dir * (0.1 + 2.9 * rng.uniform());
            let err = (so3_exp(&omega) - exp_series(&omega, 30)).norm();
            assert!(err < 1e-12, "series mismatch {err}");
        }
    }

    #[test]
    fn exp_output_is_rotation() {
        let mut rng = SeededRng::new(8);
        for _ in 0..500 {
            let omega = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 1.2;
            assert!(is_rotation(&so3_exp(&omega), 1e-9));
        }
    }

    #[test]
    fn log_identity_and_pi() {
        assert_eq!(so3_log(&Matrix3::identity()), Vector3::zeros());
        let omega = Vector3::new(core::f64::consts::PI, 0.0, 0.0);
        let back = so3_log(&so3_exp(&omega));
        assert_relative_eq!(back.norm(), core::f64::consts::PI, epsilon = 1e-9);
        assert_relative_eq!(back.x.abs(), core::f64::consts::PI, epsilon = 1e-9);
    }

    #[test]
    fn log_round_trip_random() {
        let mut rng = SeededRng::new(9);
        for _ in 0..1000 {
            let dir = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
            // Cover the full angle range including near-pi.
            let omega = dir * (rng.uniform() * core::f64::consts::PI);
            let r = so3_exp(&omega);
            let err = (so3_exp(&so3_log(&r)) - r).norm();
            assert!(err < 1e-9, "round trip error {err}");
            assert!(so3_log(&r).norm() <= core::f64::consts::PI + 1e-12);
        }
    }

    #[test]
    fn right_jacobian_consistency() {
        let mut rng = SeededRng::new(10);
        for _ in 0..100 {
            let omega = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            let j = so3_right_jacobian(&omega);
            let jinv = so3_right_jacobian_inv(&omega);
            assert_relative_eq!(j * jinv, Matrix3::identity(), epsilon = 1e-8);
            // Exp(w + d) ~ Exp(w) Exp(Jr d), exact to O(|d|^2)
            let d = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 1e-7;
            let lhs = so3_exp(&(omega + d));
            let rhs = so3_exp(&omega) * so3_exp(&(j * d));
            assert!((lhs - rhs).norm() < 1e-13);
        }
    }

    fn random_state(rng: &mut SeededRng) -> FullState {
        let v3 = |rng: &mut SeededRng| Vector3::new(rng.normal(), rng.normal(), rng.normal());
        FullState {
            rot_imu: so3_exp(&(v3(rng) * 0.8)),
            pos_imu: v3(rng) * 3.0,
            vel: v3(rng),
            bias_gyro: v3(rng) * 0.01,
            bias_acc: v3(rng) * 0.1,
            gravity: so3_exp(&(v3(rng) * 0.05)) * Vector3::new(0.0, 0.0, -9.81),
            rot_ext: so3_exp(&(v3(rng) * 0.3)),
            pos_ext: v3(rng) * 0.1,
            inv_exposure: 500.0 + 500.0 * rng.uniform(),
            time_offset: 0.01 * rng.normal(),
            intrinsics: Vector4::new(450.0, 455.0, 320.0, 240.0),
        }
    }

    #[test]
    fn boxplus_zero_is_identity() {
        let mut rng = SeededRng::new(11);
        let x = random_state(&mut rng);
        let y = x.boxplus(&ErrorState::zeros());
        assert!(x.boxminus(&y).norm() < 1e-15);
    }

    #[test]
    fn boxminus_of_boxplus_recovers_delta() {
        let mut rng = SeededRng::new(12);
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let mut d = ErrorState::zeros();
            for i in 0..STATE_DIM {
                d[i] = rng.normal() * 0.3;
            }
            let err = (x.boxplus(&d).boxminus(&x) - d).norm();
            assert!(err < 1e-9, "local inverse violated: {err}");
        }
    }

    #[test]
    fn boxminus_self_is_zero_and_translation_passthrough() {
        let mut rng = SeededRng::new(13);
        let x = random_state(&mut rng);
        assert!(x.boxminus(&x).norm() == 0.0);

        let mut y = x.clone();
        y.pos_imu += Vector3::new(1.0, 2.0, 3.0);
        let d = y.boxminus(&x);
        assert_relative_eq!(
            Vector3::new(d[blocks::POS], d[blocks::POS + 1], d[blocks::POS + 2]),
            Vector3::new(1.0, 2.0, 3.0),
            epsilon = 1e-12
        );
        let mut rest = d;
        rest[blocks::POS] = 0.0;
        rest[blocks::POS + 1] = 0.0;
        rest[blocks::POS + 2] = 0.0;
        assert!(rest.norm() < 1e-12);
    }

    #[test]
    fn boxminus_rotation_matches_log() {
        let mut rng = SeededRng::new(14);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let mut y = x.clone();
            let omega = Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.5;
            y.rot_imu = y.rot_imu * so3_exp(&omega);
            let d = y.boxminus(&x);
            let expect = so3_log(&(x.rot_imu.transpose() * y.rot_imu));
            assert_relative_eq!(
                Vector3::new(d[blocks::ROT], d[blocks::ROT + 1], d[blocks::ROT + 2]),
                expect,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn exposure_block_is_additive() {
        let mut x = FullState::default();
        x.inv_exposure = 1000.0;
        let mut d = ErrorState::zeros();
        d[blocks::INV_EXPOSURE] = 10.0;
        assert_eq!(x.boxplus(&d).inv_exposure, 1010.0);
    }
}
