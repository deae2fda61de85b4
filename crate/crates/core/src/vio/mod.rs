//! Visual-inertial odometry in two steps: a frame-to-frame update that
//! minimizes reprojection error of optically tracked map points, then a
//! frame-to-map update that aligns exposure-scaled image values with map
//! radiance (which also makes the inverse exposure observable). Radiance
//! itself is recovered per point by Bayesian fusion after the state update.

pub mod lk;

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use nalgebra::ComplexField;
use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};

pub use lk::{texture_score, track_lk, Pyramid, TrackResult, TrackStatus};

use crate::config::PipelineConfig;
use crate::filter::{iterated_update, MeasurementModel, NormalEq};
use crate::manifold::{blocks, skew, FullState, StateCovariance};
use crate::map::{PointId, RadiancePoint, VoxelMap};
use crate::photometric::{sample_bilinear_with_gradient, CorrectedImage, PhotometricModel};

/// A map point currently tracked in the image.
#[derive(Clone, Debug)]
pub struct TrackedPoint {
    pub map_ref: PointId,
    /// Pixel location in the previous frame.
    pub rho_prev: Vector2<f64>,
    /// Pixel location in the current frame (from the tracker).
    pub rho_cur: Vector2<f64>,
    /// Tracking covariance (px^2).
    pub track_cov: Matrix2<f64>,
}

/// One camera event handed to the VIO.
pub struct CameraFrame {
    pub corrected: CorrectedImage,
    pub t: f64,
    /// Time since the previous frame (s), strictly positive.
    pub dt_prev: f64,
}

/// Pixel motion of a tracked point between the previous and current frame;
/// drives the temporal-offset correction term of the projection.
#[derive(Clone, Copy, Debug)]
pub struct Flow {
    pub rho_prev: Vector2<f64>,
    pub rho_cur: Vector2<f64>,
}

pub type Jacobian2 = SMatrix<f64, 2, 29>;
pub type Jacobian3 = SMatrix<f64, 3, 29>;

struct ProjectionJac {
    pixel: Vector2<f64>,
    depth: f64,
    jac: Jacobian2,
    /// d pixel / d p_global, used to push map-point covariance into noise.
    d_dp: SMatrix<f64, 2, 3>,
}

/// Pinhole + temporal-correction projection without the Jacobian; the
/// cheap path for observation-only uses.
fn project_point(
    x: &FullState,
    p_global: &Vector3<f64>,
    flow: Option<&Flow>,
    dt_prev: f64,
    min_depth: f64,
) -> Option<(Vector2<f64>, f64)> {
    let w = x.rot_imu.transpose() * (p_global - x.pos_imu);
    let c = x.rot_ext.transpose() * (w - x.pos_ext);
    if c.z <= min_depth {
        return None;
    }
    let inv_z = 1.0 / c.z;
    let mut pixel = Vector2::new(
        x.intrinsics[0] * c.x * inv_z + x.intrinsics[2],
        x.intrinsics[1] * c.y * inv_z + x.intrinsics[3],
    );
    if let Some(flow) = flow {
        pixel += (flow.rho_cur - flow.rho_prev) * (x.time_offset / dt_prev);
    }
    Some((pixel, c.z))
}

fn projection_with_jacobian(
    x: &FullState,
    p_global: &Vector3<f64>,
    flow: Option<&Flow>,
    dt_prev: f64,
    min_depth: f64,
) -> Option<ProjectionJac> {
    let w = x.rot_imu.transpose() * (p_global - x.pos_imu);
    let c = x.rot_ext.transpose() * (w - x.pos_ext);
    if c.z <= min_depth {
        return None;
    }
    let (fx, fy, cx, cy) = (x.intrinsics[0], x.intrinsics[1], x.intrinsics[2], x.intrinsics[3]);
    let inv_z = 1.0 / c.z;
    let mut pixel = Vector2::new(fx * c.x * inv_z + cx, fy * c.y * inv_z + cy);

    // d pinhole / d camera-frame point
    let a = SMatrix::<f64, 2, 3>::new(
        fx * inv_z,
        0.0,
        -fx * c.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * c.y * inv_z * inv_z,
    );
    let rot_ext_t = x.rot_ext.transpose();
    let d_rot = rot_ext_t * skew(&w);
    let d_pos = -(rot_ext_t * x.rot_imu.transpose());
    let d_rot_ext = skew(&c);
    let d_pos_ext = -rot_ext_t;

    let mut jac = Jacobian2::zeros();
    jac.fixed_view_mut::<2, 3>(0, blocks::ROT).copy_from(&(a * d_rot));
    jac.fixed_view_mut::<2, 3>(0, blocks::POS).copy_from(&(a * d_pos));
    jac.fixed_view_mut::<2, 3>(0, blocks::ROT_EXT).copy_from(&(a * d_rot_ext));
    jac.fixed_view_mut::<2, 3>(0, blocks::POS_EXT).copy_from(&(a * d_pos_ext));
    jac[(0, blocks::INTRINSICS)] = c.x * inv_z;
    jac[(1, blocks::INTRINSICS + 1)] = c.y * inv_z;
    jac[(0, blocks::INTRINSICS + 2)] = 1.0;
    jac[(1, blocks::INTRINSICS + 3)] = 1.0;

    if let Some(flow) = flow {
        let d_flow = (flow.rho_cur - flow.rho_prev) / dt_prev;
        pixel += d_flow * x.time_offset;
        jac[(0, blocks::TIME_OFFSET)] = d_flow.x;
        jac[(1, blocks::TIME_OFFSET)] = d_flow.y;
    }

    Some(ProjectionJac { pixel, depth: c.z, jac, d_dp: a * (rot_ext_t * x.rot_imu.transpose()) })
}

/// Projection with its full 2x29 Jacobian over the error state (pose,
/// extrinsic, intrinsics, time offset); the frame-to-frame reprojection
/// residual is `rho - pixel` with Jacobian `-jac`.
pub fn projection_jacobian(
    x: &FullState,
    p_global: &Vector3<f64>,
    flow: Option<&Flow>,
    dt_prev: f64,
    min_depth: f64,
) -> Option<(Vector2<f64>, f64, Jacobian2)> {
    projection_with_jacobian(x, p_global, flow, dt_prev, min_depth)
        .map(|p| (p.pixel, p.depth, p.jac))
}

/// Project a global point with the temporal-offset correction; rejects
/// points closer than `min_depth` in front of the camera.
pub fn project(
    x: &FullState,
    p_global: &Vector3<f64>,
    rho_prev: &Vector2<f64>,
    rho_cur: &Vector2<f64>,
    dt_prev: f64,
    min_depth: f64,
) -> Option<(Vector2<f64>, f64)> {
    let flow = Flow { rho_prev: *rho_prev, rho_cur: *rho_cur };
    projection_with_jacobian(x, p_global, Some(&flow), dt_prev, min_depth)
        .map(|p| (p.pixel, p.depth))
}

// ---------------------------------------------------------------------------
// Frame-to-frame update (PnP reprojection)
// ---------------------------------------------------------------------------

struct F2fEntry {
    p_global: Vector3<f64>,
    cov_pos: Matrix3<f64>,
    flow: Flow,
    track_cov: Matrix2<f64>,
    cached_cost: f64,
}

struct ReprojectionModel<'a> {
    entries: Vec<F2fEntry>,
    dt_prev: f64,
    cfg: &'a PipelineConfig,
}

impl ReprojectionModel<'_> {
    fn entry_terms(
        &self,
        x: &FullState,
        e: &F2fEntry,
    ) -> Option<(Vector2<f64>, Matrix2<f64>, f64, ProjectionJac)> {
        let proj =
            projection_with_jacobian(x, &e.p_global, Some(&e.flow), self.dt_prev, self.cfg.min_depth)?;
        let r = e.flow.rho_cur - proj.pixel;
        let noise = e.track_cov + proj.d_dp * e.cov_pos * proj.d_dp.transpose();
        let weight = huber_weight(r.norm(), self.cfg.huber_px);
        Some((r, noise, weight, proj))
    }
}

fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

impl MeasurementModel for ReprojectionModel<'_> {
    fn linearize(&mut self, x: &FullState, acc: &mut NormalEq) {
        let mut entries = core::mem::take(&mut self.entries);
        for e in &mut entries {
            let Some((r, noise, w, proj)) = self.entry_terms(x, e) else {
                continue;
            };
            let Some(noise_inv) = noise.try_inverse() else { continue };
            // r = rho - pi(x): the residual Jacobian is minus the projection's.
            let h = -proj.jac;
            let ht_w = h.transpose() * (noise_inv * w);
            acc.h += ht_w * h;
            acc.b += ht_w * r;
            let cost = w * (r.transpose() * noise_inv * r)[(0, 0)];
            acc.cost += cost;
            acc.count += 1;
            e.cached_cost = cost;
        }
        self.entries = entries;
    }

    fn cost(&self, x: &FullState) -> f64 {
        let mut total = 0.0;
        for e in &self.entries {
            match self.entry_terms(x, e) {
                Some((r, noise, w, _)) => {
                    if let Some(ni) = noise.try_inverse() {
                        total += w * (r.transpose() * ni * r)[(0, 0)];
                    } else {
                        total += e.cached_cost;
                    }
                }
                // A point leaving the frustum must not make the step cheaper.
                None => total += e.cached_cost,
            }
        }
        total
    }
}

#[derive(Clone, Debug, Default)]
pub struct VioStats {
    pub iterations: usize,
    pub residual_count: usize,
    /// Too few usable points; the prior was passed through.
    pub skipped: bool,
    pub objective: Vec<(f64, f64)>,
}

/// Iterated update on the PnP reprojection error of the tracked points.
pub fn f2f_update(
    x_prior: &FullState,
    p_prior: &StateCovariance,
    tracked: &[TrackedPoint],
    map: &VoxelMap,
    frame: &CameraFrame,
    cfg: &PipelineConfig,
) -> (FullState, StateCovariance, VioStats) {
    let entries: Vec<F2fEntry> = tracked
        .iter()
        .map(|t| {
            let pt = map.point(t.map_ref);
            F2fEntry {
                p_global: pt.pos,
                cov_pos: pt.cov_pos,
                flow: Flow { rho_prev: t.rho_prev, rho_cur: t.rho_cur },
                track_cov: t.track_cov,
                cached_cost: 0.0,
            }
        })
        .collect();
    let mut model = ReprojectionModel { entries, dt_prev: frame.dt_prev, cfg };
    let out = iterated_update(x_prior, p_prior, &mut model, cfg.vio_min_points, cfg);
    let stats = VioStats {
        iterations: out.iterations,
        residual_count: out.residual_count,
        skipped: out.degenerate,
        objective: out.objective,
    };
    (out.state, out.cov, stats)
}

// ---------------------------------------------------------------------------
// Frame-to-map update (radiance alignment)
// ---------------------------------------------------------------------------

/// Exposure-scaled radiance observation of a map point in this frame, with
/// its noise from image intensity noise and projection jitter pushed
/// through the local image gradient.
pub struct RadianceObservation {
    pub phi: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub pixel: Vector2<f64>,
}

/// Numerical floor on the per-channel observation sigma, relative to the
/// inverse exposure (keeps noise matrices invertible in noise-free runs).
const RADIANCE_SIGMA_FLOOR_REL: f64 = 1e-4;

fn radiance_observation_cov(
    gamma_sample: &Vector3<f64>,
    grads: &[Vector3<f64>; 2],
    pixel: &Vector2<f64>,
    eps: f64,
    frame: &CameraFrame,
    model: &PhotometricModel,
    cfg: &PipelineConfig,
) -> Matrix3<f64> {
    let px = pixel.x.round().clamp(0.0, (frame.corrected.width - 1) as f64) as usize;
    let py = pixel.y.round().clamp(0.0, (frame.corrected.height - 1) as f64) as usize;
    let v = model.vignette.at(px, py);
    let mut cov = Matrix3::zeros();
    let floor = eps * RADIANCE_SIGMA_FLOOR_REL;
    for i in 0..3 {
        // Intensity noise mapped through the inverse response and vignette.
        let intensity = model.crf[i].eval(((v * gamma_sample[i]).min(1.0)).max(0.0));
        let sigma_gamma = cfg.intensity_sigma * model.crf[i].inv_slope(intensity) / v;
        cov[(i, i)] = (eps * sigma_gamma).powi(2) + floor * floor;
    }
    // Projection jitter from state error, through the image gradient.
    let g = SMatrix::<f64, 3, 2>::from_columns(&[grads[0] * eps, grads[1] * eps]);
    cov += g * g.transpose() * (cfg.pose_pixel_sigma * cfg.pose_pixel_sigma);
    cov
}

pub fn observe_radiance(
    x: &FullState,
    p_global: &Vector3<f64>,
    flow: Option<&Flow>,
    frame: &CameraFrame,
    model: &PhotometricModel,
    cfg: &PipelineConfig,
) -> Option<RadianceObservation> {
    let (pixel, _) = project_point(x, p_global, flow, frame.dt_prev, cfg.min_depth)?;
    let (gamma_sample, grads) = sample_bilinear_with_gradient(&frame.corrected, &pixel)?;
    let eps = x.inv_exposure;
    let cov = radiance_observation_cov(&gamma_sample, &grads, &pixel, eps, frame, model, cfg);
    Some(RadianceObservation { phi: gamma_sample * eps, cov, pixel })
}

/// Frame-to-map radiance residual with its Jacobian and lumped noise.
/// `None` when the point does not project to a valid, unsaturated sample.
pub fn radiance_residual(
    x: &FullState,
    pt: &RadiancePoint,
    frame: &CameraFrame,
    model: &PhotometricModel,
    flow: Option<&Flow>,
    cfg: &PipelineConfig,
) -> Option<(Vector3<f64>, Jacobian3, Matrix3<f64>)> {
    let proj = projection_with_jacobian(x, &pt.pos, flow, frame.dt_prev, cfg.min_depth)?;
    let (gamma_sample, grads) = sample_bilinear_with_gradient(&frame.corrected, &proj.pixel)?;
    let eps = x.inv_exposure;
    let obs_cov =
        radiance_observation_cov(&gamma_sample, &grads, &proj.pixel, eps, frame, model, cfg);
    let r = gamma_sample * eps - pt.radiance;
    let dt_gamma = (frame.t - pt.t_rad_updated).max(0.0);
    let noise =
        pt.cov_rad + Matrix3::identity() * (cfg.sigma_illumination * dt_gamma) + obs_cov;

    let mut jac = Jacobian3::zeros();
    // Chain rule through the image: eps * grad(Gamma) * d pixel / d state.
    let g = SMatrix::<f64, 3, 2>::from_columns(&[grads[0], grads[1]]);
    jac += g * proj.jac * eps;
    if cfg.estimate_exposure {
        for i in 0..3 {
            jac[(i, blocks::INV_EXPOSURE)] = gamma_sample[i];
        }
    }
    Some((r, jac, noise))
}

/// Conservative camera frustum test for voxel-sized spheres: never rejects
/// anything that could project into the (margin-expanded) image.
pub struct FrustumCull {
    rot_cw: crate::manifold::Rotation,
    cam_pos: Vector3<f64>,
    intrinsics: nalgebra::Vector4<f64>,
    width: f64,
    height: f64,
    margin: f64,
    min_depth: f64,
}

impl FrustumCull {
    pub fn new(x: &FullState, width: usize, height: usize, margin: f64, min_depth: f64) -> Self {
        let rot_wc = x.rot_imu * x.rot_ext;
        Self {
            rot_cw: rot_wc.transpose(),
            cam_pos: x.rot_imu * x.pos_ext + x.pos_imu,
            intrinsics: x.intrinsics,
            width: width as f64,
            height: height as f64,
            margin,
            min_depth,
        }
    }

    pub fn sphere_may_project(&self, center: &Vector3<f64>, radius: f64) -> bool {
        let c = self.rot_cw * (center - self.cam_pos);
        if c.z + radius < self.min_depth {
            return false;
        }
        let z_near = (c.z - radius).max(self.min_depth * 0.5);
        let z_far = c.z + radius;
        let (fx, fy, cx, cy) = (
            self.intrinsics[0],
            self.intrinsics[1],
            self.intrinsics[2],
            self.intrinsics[3],
        );
        let bound = |v: f64, f: f64, off: f64, limit: f64| {
            let lo_num = v - radius;
            let hi_num = v + radius;
            // Widest possible projected interval over the sphere.
            let candidates = [
                f * lo_num / z_near,
                f * lo_num / z_far,
                f * hi_num / z_near,
                f * hi_num / z_far,
            ];
            let min = candidates.iter().cloned().fold(f64::INFINITY, f64::min) + off;
            let max = candidates.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + off;
            max >= -self.margin && min <= limit + self.margin
        };
        bound(c.x, fx, cx, self.width - 1.0) && bound(c.y, fy, cy, self.height - 1.0)
    }
}

struct F2mEntry {
    point: RadiancePoint,
    flow: Option<Flow>,
    cached_cost: f64,
}

struct RadianceAlignment<'a> {
    entries: Vec<F2mEntry>,
    frame: &'a CameraFrame,
    model: &'a PhotometricModel,
    cfg: &'a PipelineConfig,
}

impl MeasurementModel for RadianceAlignment<'_> {
    fn linearize(&mut self, x: &FullState, acc: &mut NormalEq) {
        let mut entries = core::mem::take(&mut self.entries);
        for e in &mut entries {
            let Some((r, h, noise)) =
                radiance_residual(x, &e.point, self.frame, self.model, e.flow.as_ref(), self.cfg)
            else {
                continue;
            };
            let Some(noise_inv) = noise.try_inverse() else { continue };
            let w = huber_weight(r.norm(), self.cfg.huber_radiance * x.inv_exposure);
            let ht_w = h.transpose() * (noise_inv * w);
            acc.h += ht_w * h;
            acc.b += ht_w * r;
            let cost = w * (r.transpose() * noise_inv * r)[(0, 0)];
            acc.cost += cost;
            acc.count += 1;
            e.cached_cost = cost;
        }
        self.entries = entries;
    }

    fn cost(&self, x: &FullState) -> f64 {
        let mut total = 0.0;
        for e in &self.entries {
            let term = radiance_residual(x, &e.point, self.frame, self.model, e.flow.as_ref(), self.cfg)
                .and_then(|(r, _, noise)| {
                    noise.try_inverse().map(|ni| {
                        let w = huber_weight(r.norm(), self.cfg.huber_radiance * x.inv_exposure);
                        w * (r.transpose() * ni * r)[(0, 0)]
                    })
                });
            total += term.unwrap_or(e.cached_cost);
        }
        total
    }
}

/// Iterated update on the frame-to-map radiance error of the tracked
/// points; refines every state block including the inverse exposure.
pub fn f2m_update(
    x_prior: &FullState,
    p_prior: &StateCovariance,
    tracked: &[TrackedPoint],
    map: &VoxelMap,
    frame: &CameraFrame,
    model: &PhotometricModel,
    cfg: &PipelineConfig,
) -> (FullState, StateCovariance, VioStats) {
    let entries: Vec<F2mEntry> = tracked
        .iter()
        .filter_map(|t| {
            let pt = map.point(t.map_ref);
            if !pt.rad_initialized {
                return None;
            }
            Some(F2mEntry {
                point: pt.clone(),
                flow: Some(Flow { rho_prev: t.rho_prev, rho_cur: t.rho_cur }),
                cached_cost: 0.0,
            })
        })
        .collect();
    let mut model_m = RadianceAlignment { entries, frame, model, cfg };
    let out = iterated_update(x_prior, p_prior, &mut model_m, cfg.vio_min_points, cfg);
    let stats = VioStats {
        iterations: out.iterations,
        residual_count: out.residual_count,
        skipped: out.degenerate,
        objective: out.objective,
    };
    (out.state, out.cov, stats)
}

// ---------------------------------------------------------------------------
// Radiance recovery and tracked-point maintenance
// ---------------------------------------------------------------------------

/// Bayesian radiance fusion for one map point. The first observation
/// initializes radiance and covariance outright; later ones are fused after
/// inflating the stored covariance by the illumination random walk over the
/// time since the last update.
pub fn bayes_update_radiance(
    pt: &mut RadiancePoint,
    phi: &Vector3<f64>,
    cov_phi: &Matrix3<f64>,
    now: f64,
    sigma_ic: f64,
) {
    if !pt.rad_initialized {
        pt.radiance = *phi;
        pt.cov_rad = *cov_phi;
        pt.rad_initialized = true;
        pt.t_rad_updated = now;
        return;
    }
    let dt = (now - pt.t_rad_updated).max(0.0);
    let prior = pt.cov_rad + Matrix3::identity() * (sigma_ic * dt);
    // Kalman form of the information fusion: one inverse instead of three.
    let Some(s_inv) = (prior + cov_phi).try_inverse() else {
        return;
    };
    let gain = prior * s_inv;
    pt.radiance += gain * (phi - pt.radiance);
    let mut fused = prior - gain * prior;
    // Keep the stored covariance exactly symmetric.
    fused = (fused + fused.transpose()) * 0.5;
    pt.cov_rad = fused;
    pt.t_rad_updated = now;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrackMaintenanceStats {
    pub removed: usize,
    pub added: usize,
}

/// Candidate state cached by the per-frame radiance sweep so maintenance
/// does not have to re-project every activated point.
#[derive(Clone, Copy, Debug, Default)]
pub struct CandidateProjection {
    pub pixel: Vector2<f64>,
    /// Projected in range with a valid unsaturated bilinear sample.
    pub visible: bool,
    pub rad_initialized: bool,
}

/// Prune inconsistent or out-of-view tracked points, then top the set up
/// from `candidates` (the activated map points, typically pre-culled to
/// the camera frustum), keeping a minimum pixel spacing between tracked
/// points (grid-bucketed).
pub fn update_tracked_points(
    tracked: &mut Vec<TrackedPoint>,
    map: &VoxelMap,
    frame: &CameraFrame,
    model: &PhotometricModel,
    pyramid: Option<&Pyramid>,
    candidates: &[PointId],
    cached: Option<&[CandidateProjection]>,
    x: &FullState,
    cfg: &PipelineConfig,
) -> TrackMaintenanceStats {
    let mut stats = TrackMaintenanceStats::default();
    let width = frame.corrected.width as f64;
    let height = frame.corrected.height as f64;
    // The tracker needs its padded window inside every pyramid level.
    let margin = ((cfg.lk_half_win + 3) << cfg.lk_levels.saturating_sub(1)) as f64;

    // Removal pass; survivors are re-anchored at their projected location.
    let before = tracked.len();
    let mut survivors: Vec<TrackedPoint> = Vec::with_capacity(before);
    for t in tracked.drain(..) {
        let pt = map.point(t.map_ref);
        let flow = Flow { rho_prev: t.rho_prev, rho_cur: t.rho_cur };
        let Some(proj) =
            projection_with_jacobian(x, &pt.pos, Some(&flow), frame.dt_prev, cfg.min_depth)
        else {
            continue;
        };
        let pix = proj.pixel;
        if pix.x < margin || pix.y < margin || pix.x > width - 1.0 - margin
            || pix.y > height - 1.0 - margin
        {
            continue;
        }
        if (t.rho_cur - pix).norm() > cfg.reproj_outlier_px {
            continue;
        }
        if pt.rad_initialized {
            if let Some((r, _, noise)) =
                radiance_residual(x, pt, frame, model, Some(&flow), cfg)
            {
                if let Some(ni) = noise.try_inverse() {
                    let mahal = (r.transpose() * ni * r)[(0, 0)].max(0.0).sqrt();
                    if mahal > cfg.radiance_outlier_sigma {
                        continue;
                    }
                }
            }
        }
        let mut t = t;
        t.rho_prev = pix;
        t.rho_cur = pix;
        survivors.push(t);
    }
    stats.removed = before - survivors.len();

    // Dense spacing grid over the survivors (images are small in units of
    // the spacing, so a flat array beats hashing).
    let cell = cfg.tracked_spacing_px;
    let cells_x = (width / cell).ceil() as usize + 2;
    let cells_y = (height / cell).ceil() as usize + 2;
    let mut grid: alloc::vec::Vec<alloc::vec::Vec<Vector2<f64>>> =
        alloc::vec![alloc::vec::Vec::new(); cells_x * cells_y];
    let key_of = |p: &Vector2<f64>| {
        (
            ((p.x / cell) as usize).min(cells_x - 1),
            ((p.y / cell) as usize).min(cells_y - 1),
        )
    };
    let crowded = |grid: &[alloc::vec::Vec<Vector2<f64>>], pix: &Vector2<f64>| {
        let (kx, ky) = key_of(pix);
        for dy in ky.saturating_sub(1)..=(ky + 1).min(cells_y - 1) {
            for dx in kx.saturating_sub(1)..=(kx + 1).min(cells_x - 1) {
                if grid[dy * cells_x + dx]
                    .iter()
                    .any(|q| (q - pix).norm() < cell)
                {
                    return true;
                }
            }
        }
        false
    };
    // A cell whose farthest corner is within the spacing of some occupant
    // is crowded for every pixel inside it; candidates landing there are
    // rejected with one read.
    let mut blocked = alloc::vec![false; cells_x * cells_y];
    let mark_blocked = |blocked: &mut [bool], q: &Vector2<f64>| {
        let (kx, ky) = key_of(q);
        for dy in ky.saturating_sub(1)..=(ky + 1).min(cells_y - 1) {
            for dx in kx.saturating_sub(1)..=(kx + 1).min(cells_x - 1) {
                if blocked[dy * cells_x + dx] {
                    continue;
                }
                let corner_x = (dx as f64 + if q.x / cell - dx as f64 > 0.5 { 0.0 } else { 1.0 }) * cell;
                let corner_y = (dy as f64 + if q.y / cell - dy as f64 > 0.5 { 0.0 } else { 1.0 }) * cell;
                let far = Vector2::new(corner_x, corner_y);
                if (q - far).norm() < cell {
                    blocked[dy * cells_x + dx] = true;
                }
            }
        }
    };
    let mut have: alloc::vec::Vec<bool> = alloc::vec![false; map.len()];
    for t in &survivors {
        let (kx, ky) = key_of(&t.rho_cur);
        grid[ky * cells_x + kx].push(t.rho_cur);
        mark_blocked(&mut blocked, &t.rho_cur);
        have[t.map_ref as usize] = true;
    }

    // Addition pass over the candidates, ascending id for determinism.
    for (slot, &id) in candidates.iter().enumerate() {
        if have[id as usize] {
            continue;
        }
        let pix = if let Some(cached) = cached {
            let c = cached[slot];
            if !c.visible || !c.rad_initialized {
                continue;
            }
            c.pixel
        } else {
            let pt = map.point(id);
            if !pt.rad_initialized {
                continue;
            }
            match project_point(x, &pt.pos, None, frame.dt_prev, cfg.min_depth) {
                Some((pix, _)) => pix,
                None => continue,
            }
        };
        if pix.x < margin || pix.y < margin || pix.x > width - 1.0 - margin
            || pix.y > height - 1.0 - margin
        {
            continue;
        }
        {
            let (kx, ky) = key_of(&pix);
            if blocked[ky * cells_x + kx] {
                continue;
            }
        }
        if crowded(&grid, &pix) {
            continue;
        }
        if cached.is_none() && sample_bilinear_with_gradient(&frame.corrected, &pix).is_none() {
            continue;
        }
        // Skip candidates the tracker would lose as textureless anyway
        // (checked last: it is by far the most expensive gate).
        if let Some(pyr) = pyramid {
            match texture_score(&pyr.levels[0], &pix, cfg.lk_half_win) {
                Some(score) if score >= cfg.lk_min_eig => {}
                _ => continue,
            }
        }
        let (kx, ky) = key_of(&pix);
        grid[ky * cells_x + kx].push(pix);
        mark_blocked(&mut blocked, &pix);
        survivors.push(TrackedPoint {
            map_ref: id,
            rho_prev: pix,
            rho_cur: pix,
            track_cov: Matrix2::identity() * 0.25,
        });
        stats.added += 1;
    }

    *tracked = survivors;
    stats
}

#[cfg(test)]
mod tests;
