//! IMU strapdown propagation of the state and its covariance between fusion
//! events, and the backward pass that de-skews LiDAR scans.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::Vector3;

use crate::config::PipelineConfig;
use crate::lio::LidarScan;
use crate::manifold::{
    blocks, skew, so3_exp, so3_log, so3_right_jacobian, symmetrize, tangent_basis, FullState,
    Rotation, StateCovariance,
};

/// One inertial measurement. Streams must be strictly increasing in `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Angular rate in the IMU frame (rad/s).
    pub gyro: Vector3<f64>,
    /// Specific force in the IMU frame (m/s^2).
    pub acc: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ImuError {
    /// Sample coverage has a hole larger than twice the nominal period.
    Gap { from: f64, to: f64 },
    /// Sample timestamps are not strictly increasing.
    Unordered,
}

impl fmt::Display for ImuError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImuError::Gap { from, to } => {
                write!(f, "imu stream gap from {from:.6}s to {to:.6}s")
            }
            ImuError::Unordered => write!(f, "imu samples not strictly increasing"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ImuError {}

/// Linear interpolation of the measurement at `t`, clamped to the ends of the
/// sample range.
fn measurement_at(samples: &[ImuSample], t: f64) -> (Vector3<f64>, Vector3<f64>) {
    if t <= samples[0].t {
        return (samples[0].gyro, samples[0].acc);
    }
    if t >= samples[samples.len() - 1].t {
        let s = &samples[samples.len() - 1];
        return (s.gyro, s.acc);
    }
    let idx = samples.partition_point(|s| s.t <= t);
    let a = &samples[idx - 1];
    let b = &samples[idx];
    let alpha = (t - a.t) / (b.t - a.t);
    (
        a.gyro + (b.gyro - a.gyro) * alpha,
        a.acc + (b.acc - a.acc) * alpha,
    )
}

/// Integration node times covering `[t0, t1]`: the boundaries plus every
/// sample time strictly inside. Fails on coverage gaps.
fn node_times(samples: &[ImuSample], t0: f64, t1: f64, max_gap: f64) -> Result<Vec<f64>, ImuError> {
    if samples.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(ImuError::Unordered);
    }
    // Absorb round-off when the spacing sits exactly at the limit.
    let max_gap = max_gap * (1.0 + 1e-9);
    if samples.is_empty() {
        return if t1 - t0 > max_gap {
            Err(ImuError::Gap { from: t0, to: t1 })
        } else {
            Ok(alloc::vec![t0, t1])
        };
    }
    let mut nodes = Vec::new();
    nodes.push(t0);
    for s in samples {
        if s.t > t0 && s.t < t1 {
            nodes.push(s.t);
        }
    }
    nodes.push(t1);
    // Boundary coverage: extrapolating further than one max gap is a hole.
    let first = samples.first().unwrap();
    if first.t - t0 > max_gap {
        return Err(ImuError::Gap { from: t0, to: first.t });
    }
    let last = samples.last().unwrap();
    if t1 - last.t > max_gap {
        return Err(ImuError::Gap { from: last.t, to: t1 });
    }
    for w in nodes.windows(2) {
        if w[1] - w[0] > max_gap {
            return Err(ImuError::Gap { from: w[0], to: w[1] });
        }
    }
    Ok(nodes)
}

/// One midpoint integration step of the nominal state from `ta` to `tb`.
/// Returns the bias-corrected mean rate, mean body acceleration and dt used
/// by the covariance step.
fn step_state(
    x: &mut FullState,
    samples: &[ImuSample],
    ta: f64,
    tb: f64,
) -> (Vector3<f64>, Vector3<f64>, f64) {
    let dt = tb - ta;
    let (ga, aa) = measurement_at(samples, ta);
    let (gb, ab) = measurement_at(samples, tb);
    let omega = (ga + gb) * 0.5 - x.bias_gyro;
    let rot_a = x.rot_imu;
    let rot_b = rot_a * so3_exp(&(omega * dt));
    let acc_world =
        ((rot_a * (aa - x.bias_acc)) + (rot_b * (ab - x.bias_acc))) * 0.5 + x.gravity;
    x.pos_imu += x.vel * dt + acc_world * (0.5 * dt * dt);
    x.vel += acc_world * dt;
    x.rot_imu = rot_b;
    let acc_body = (aa + ab) * 0.5 - x.bias_acc;
    (omega, acc_body, dt)
}

/// Propagate state and covariance to `t_target` using samples over
/// `[t_start, t_target]`.
///
/// The error-state transition is first order per integration interval;
/// extrinsic, intrinsic, exposure and time-offset blocks have no
/// deterministic dynamics, with exposure and time offset picking up
/// random-walk process noise.
pub fn propagate(
    x: &FullState,
    cov: &StateCovariance,
    samples: &[ImuSample],
    t_start: f64,
    t_target: f64,
    cfg: &PipelineConfig,
) -> Result<(FullState, StateCovariance), ImuError> {
    use blocks::*;
    if t_target <= t_start {
        return Ok((x.clone(), *cov));
    }
    let max_gap = 2.0 / cfg.imu_rate;
    let nodes = node_times(samples, t_start, t_target, max_gap)?;
    let noise = &cfg.imu_noise;

    let mut x = x.clone();
    let mut cov = *cov;
    for w in nodes.windows(2) {
        let rot_prev = x.rot_imu;
        let gravity = x.gravity;
        let (omega, acc_body, dt) = step_state(&mut x, samples, w[0], w[1]);

        let mut f = StateCovariance::identity();
        let jr = so3_right_jacobian(&(omega * dt));
        f.fixed_view_mut::<3, 3>(ROT, ROT)
            .copy_from(&so3_exp(&(omega * dt)).transpose());
        f.fixed_view_mut::<3, 3>(ROT, BIAS_GYRO).copy_from(&(-jr * dt));
        f.fixed_view_mut::<3, 3>(POS, VEL)
            .copy_from(&(Rotation::identity() * dt));
        f.fixed_view_mut::<3, 3>(VEL, ROT)
            .copy_from(&(-rot_prev * skew(&acc_body) * dt));
        f.fixed_view_mut::<3, 3>(VEL, BIAS_ACC).copy_from(&(-rot_prev * dt));
        f.fixed_view_mut::<3, 2>(VEL, GRAVITY)
            .copy_from(&(-skew(&gravity) * tangent_basis(&gravity) * dt));

        cov = f * cov * f.transpose();

        // Discrete process noise over dt.
        let qg = noise.gyro_noise_density * noise.gyro_noise_density;
        let qa = noise.acc_noise_density * noise.acc_noise_density;
        let q_theta = jr * jr.transpose() * (qg * dt);
        for i in 0..3 {
            for k in 0..3 {
                cov[(ROT + i, ROT + k)] += q_theta[(i, k)];
            }
            cov[(VEL + i, VEL + i)] += qa * dt;
            cov[(BIAS_GYRO + i, BIAS_GYRO + i)] +=
                noise.gyro_bias_rw * noise.gyro_bias_rw * dt;
            cov[(BIAS_ACC + i, BIAS_ACC + i)] += noise.acc_bias_rw * noise.acc_bias_rw * dt;
        }
        cov[(INV_EXPOSURE, INV_EXPOSURE)] +=
            cfg.exposure_rw_rel * x.inv_exposure * x.inv_exposure * dt;
        cov[(TIME_OFFSET, TIME_OFFSET)] += cfg.time_offset_rw * dt;
    }
    symmetrize(&mut cov);
    Ok((x, cov))
}

/// Pose node used for in-scan interpolation.
#[derive(Clone, Copy)]
struct PoseNode {
    t: f64,
    rot: Rotation,
    pos: Vector3<f64>,
}

/// Re-express every scan point in the LiDAR frame at scan-end time by
/// integrating the IMU backward from `x_end`.
///
/// Returns the compensated scan and the number of points rejected for being
/// stamped outside the scan interval.
pub fn backward_compensate(
    scan: &LidarScan,
    samples: &[ImuSample],
    x_end: &FullState,
    cfg: &PipelineConfig,
) -> Result<(LidarScan, usize), ImuError> {
    if scan.points.is_empty() {
        return Ok((scan.clone(), 0));
    }
    let t_end = scan.t_end;
    let t_begin = scan
        .points
        .iter()
        .map(|p| p.t)
        .fold(f64::INFINITY, f64::min)
        .min(t_end);
    let max_gap = 2.0 / cfg.imu_rate;
    let nodes_t = node_times(samples, t_begin, t_end, max_gap)?;

    // Backward pass from the known end state.
    let mut nodes: Vec<PoseNode> = Vec::with_capacity(nodes_t.len());
    let mut rot = x_end.rot_imu;
    let mut pos = x_end.pos_imu;
    let mut vel = x_end.vel;
    nodes.push(PoseNode { t: t_end, rot, pos });
    for w in nodes_t.windows(2).rev() {
        let (ta, tb) = (w[0], w[1]);
        let dt = tb - ta;
        let (ga, aa) = measurement_at(samples, ta);
        let (gb, ab) = measurement_at(samples, tb);
        let omega = (ga + gb) * 0.5 - x_end.bias_gyro;
        let rot_a = rot * so3_exp(&(omega * dt)).transpose();
        let acc_world = ((rot_a * (aa - x_end.bias_acc)) + (rot * (ab - x_end.bias_acc))) * 0.5
            + x_end.gravity;
        vel -= acc_world * dt;
        pos = pos - vel * dt - acc_world * (0.5 * dt * dt);
        rot = rot_a;
        nodes.push(PoseNode { t: ta, rot, pos });
    }
    nodes.reverse();

    let rot_l = scan.rot_ext;
    let pos_l = scan.pos_ext;
    let end_rot_t = x_end.rot_imu.transpose();
    let rot_l_t = rot_l.transpose();

    let mut out = scan.clone();
    out.points.clear();
    let mut rejected = 0usize;
    let eps = 1e-9;
    for p in &scan.points {
        if p.t < t_begin - eps || p.t > t_end + eps {
            rejected += 1;
            continue;
        }
        let (rot_p, pos_p) = interpolate_pose(&nodes, p.t);
        let global = rot_p * (rot_l * p.pos + pos_l) + pos_p;
        let lidar_end = rot_l_t * (end_rot_t * (global - x_end.pos_imu) - pos_l);
        out.points.push(crate::lio::ScanPoint { pos: lidar_end, t: t_end });
    }
    Ok((out, rejected))
}

fn interpolate_pose(nodes: &[PoseNode], t: f64) -> (Rotation, Vector3<f64>) {
    if t <= nodes[0].t {
        return (nodes[0].rot, nodes[0].pos);
    }
    let last = &nodes[nodes.len() - 1];
    if t >= last.t {
        return (last.rot, last.pos);
    }
    let idx = nodes.partition_point(|n| n.t <= t);
    let a = &nodes[idx - 1];
    let b = &nodes[idx];
    let alpha = (t - a.t) / (b.t - a.t);
    let rot = a.rot * so3_exp(&(so3_log(&(a.rot.transpose() * b.rot)) * alpha));
    (rot, a.pos + (b.pos - a.pos) * alpha)
}

/// Gravity vector from the mean specific force of a stationary window:
/// at rest the accelerometer reads -R^T g with R = I.
pub fn init_gravity(samples: &[ImuSample], window: f64) -> Vector3<f64> {
    let t0 = samples.first().map(|s| s.t).unwrap_or(0.0);
    let mut acc = Vector3::zeros();
    let mut n = 0usize;
    for s in samples.iter().take_while(|s| s.t <= t0 + window) {
        acc += s.acc;
        n += 1;
    }
    if n == 0 {
        return Vector3::new(0.0, 0.0, -9.81);
    }
    -(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lio::{LidarScan, ScanPoint};
    use approx::assert_relative_eq;

    fn stream(
        rate: f64,
        dur: f64,
        f: impl Fn(f64) -> (Vector3<f64>, Vector3<f64>),
    ) -> Vec<ImuSample> {
        let n = (dur * rate).round() as usize;
        (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                let (gyro, acc) = f(t);
                ImuSample { t, gyro, acc }
            })
            .collect()
    }

    #[test]
    fn static_equilibrium_keeps_pose() {
        let cfg = PipelineConfig::default();
        let x = FullState::default();
        let cov = StateCovariance::identity() * 1e-4;
        // Stationary: specific force balances gravity.
        let samples = stream(200.0, 1.0, |_| {
            (Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81))
        });
        let (y, _) = propagate(&x, &cov, &samples, 0.0, 1.0, &cfg).unwrap();
        assert!(y.pos_imu.norm() < 1e-12);
        assert!(y.vel.norm() < 1e-12);
        assert!((y.rot_imu - Rotation::identity()).norm() < 1e-12);
    }

    #[test]
    fn constant_acceleration_kinematics() {
        let cfg = PipelineConfig::default();
        let mut x = FullState::default();
        x.gravity = Vector3::zeros();
        let cov = StateCovariance::identity() * 1e-4;
        let samples = stream(100.0, 1.0, |_| {
            (Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0))
        });
        let (y, _) = propagate(&x, &cov, &samples, 0.0, 1.0, &cfg).unwrap();
        assert_relative_eq!(y.pos_imu, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-9);
        assert_relative_eq!(y.vel, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn split_propagation_matches_single_pass() {
        let cfg = PipelineConfig::default();
        let mut x = FullState::default();
        x.bias_gyro = Vector3::new(0.001, -0.002, 0.0005);
        let cov = StateCovariance::identity() * 1e-3;
        let samples = stream(200.0, 2.0, |t| {
            (
                Vector3::new((2.1 * t).sin() * 0.3, 0.2, (1.3 * t).cos() * 0.1),
                Vector3::new((0.9 * t).cos(), -0.4, 9.5 + 0.2 * (3.0 * t).sin()),
            )
        });
        // Split at a sample time so both passes use identical nodes.
        let t_mid = samples[247].t;
        let (xa, pa) = propagate(&x, &cov, &samples, 0.0, 2.0, &cfg).unwrap();
        let (xm, pm) = propagate(&x, &cov, &samples, 0.0, t_mid, &cfg).unwrap();
        let (xb, pb) = propagate(&xm, &pm, &samples, t_mid, 2.0, &cfg).unwrap();
        assert!(xa.boxminus(&xb).norm() < 1e-9, "state split mismatch");
        assert!((pa - pb).norm() < 1e-9, "cov split mismatch {}", (pa - pb).norm());
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let cfg = PipelineConfig::default();
        let x = FullState::default();
        let cov = StateCovariance::identity() * 1e-4;
        let samples = stream(200.0, 1.0, |t| {
            (
                Vector3::new(0.5 * t.sin(), 0.1, 0.3),
                Vector3::new(0.4, -0.2, 9.81 + 0.1 * t),
            )
        });
        let (_, p) = propagate(&x, &cov, &samples, 0.0, 1.0, &cfg).unwrap();
        assert!((p - p.transpose()).norm() < 1e-12);
        let eig = p.symmetric_eigenvalues();
        for i in 0..eig.len() {
            assert!(eig[i] >= -1e-12, "negative eigenvalue {}", eig[i]);
        }
    }

    #[test]
    fn gap_in_coverage_is_rejected() {
        let cfg = PipelineConfig::default();
        let x = FullState::default();
        let cov = StateCovariance::identity() * 1e-4;
        let mut samples = stream(200.0, 1.0, |_| {
            (Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81))
        });
        // Cut a 50 ms hole (10 nominal periods).
        samples.retain(|s| s.t < 0.40 || s.t > 0.45);
        let err = propagate(&x, &cov, &samples, 0.0, 1.0, &cfg).unwrap_err();
        assert!(matches!(err, ImuError::Gap { .. }));
    }

    fn scan_with(points: Vec<ScanPoint>, t_end: f64) -> LidarScan {
        LidarScan {
            points,
            t_end,
            rot_ext: Rotation::identity(),
            pos_ext: Vector3::zeros(),
        }
    }

    #[test]
    fn stationary_compensation_is_identity() {
        let cfg = PipelineConfig::default();
        let x = FullState::default();
        let samples = stream(200.0, 0.2, |_| {
            (Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81))
        });
        let pts = vec![
            ScanPoint { pos: Vector3::new(1.0, 2.0, 0.5), t: 0.05 },
            ScanPoint { pos: Vector3::new(-0.3, 0.7, 1.5), t: 0.12 },
        ];
        let scan = scan_with(pts.clone(), 0.2);
        let (out, rejected) = backward_compensate(&scan, &samples, &x, &cfg).unwrap();
        assert_eq!(rejected, 0);
        for (a, b) in out.points.iter().zip(&pts) {
            assert_relative_eq!(a.pos, b.pos, epsilon = 1e-9);
            assert_eq!(a.t, 0.2);
        }
    }

    #[test]
    fn constant_yaw_rotates_midscan_point() {
        let cfg = PipelineConfig::default();
        let mut x = FullState::default();
        x.gravity = Vector3::zeros();
        let rate = core::f64::consts::FRAC_PI_2; // 90 deg/s
        let samples = stream(400.0, 0.2, |_| {
            (Vector3::new(0.0, 0.0, rate), Vector3::zeros())
        });
        let scan = scan_with(
            vec![ScanPoint { pos: Vector3::new(1.0, 0.0, 0.0), t: 0.15 }],
            0.2,
        );
        let (out, _) = backward_compensate(&scan, &samples, &x, &cfg).unwrap();
        // 50 ms before scan end at 90 deg/s: the device was 4.5 deg behind.
        let expect = so3_exp(&Vector3::new(0.0, 0.0, -rate * 0.05)) * Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(out.points[0].pos, expect, epsilon = 1e-6);
        let angle = out.points[0].pos.y.atan2(out.points[0].pos.x).to_degrees();
        assert_relative_eq!(angle, -4.5, epsilon = 1e-3);
    }

    #[test]
    fn out_of_interval_points_are_rejected() {
        let cfg = PipelineConfig::default();
        let x = FullState::default();
        let samples = stream(200.0, 0.5, |_| {
            (Vector3::zeros(), Vector3::new(0.0, 0.0, 9.81))
        });
        let scan = scan_with(
            vec![
                ScanPoint { pos: Vector3::x(), t: 0.1 },
                ScanPoint { pos: Vector3::y(), t: 0.45 },
            ],
            0.2,
        );
        let (out, rejected) = backward_compensate(&scan, &samples, &x, &cfg).unwrap();
        assert_eq!(rejected, 1);
        assert_eq!(out.points.len(), 1);
    }

    #[test]
    fn gravity_init_from_stationary_window() {
        let samples = stream(200.0, 1.0, |_| {
            (Vector3::zeros(), Vector3::new(0.05, 0.0, 9.78))
        });
        let g = init_gravity(&samples, 0.5);
        assert_relative_eq!(g, Vector3::new(-0.05, 0.0, -9.78), epsilon = 1e-12);
        assert!(g.norm() > 9.0 && g.norm() < 10.5);
    }
}
