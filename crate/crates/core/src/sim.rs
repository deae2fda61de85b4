//! Deterministic synthetic world and sensor generators. Every acceptance
//! oracle that the real-world experiments cannot provide on a desk comes
//! from here: trajectories carry closed-form derivatives, surfaces carry
//! known radiance textures, and every noise draw is seeded.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use nalgebra::ComplexField;
use nalgebra::Vector3;

use crate::config::NoiseParams;
use crate::imu::ImuSample;
use crate::lio::{LidarScan, ScanPoint};
use crate::manifold::{so3_exp, tangent_basis, Rotation};
use crate::photometric::{render_pixel, PhotometricModel, RawImage};
use crate::rng::SeededRng;

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// Procedural radiance field over the local (u, v) coordinates of a plane.
/// Values are normalized to about [0, 1] and scaled by the world ambient.
#[derive(Clone, Debug)]
pub enum Texture {
    Uniform([f64; 3]),
    /// Smooth two-tone stripes along `u` (horizontal = false) or `v`.
    Stripes { period: f64, along_v: bool, a: [f64; 3], b: [f64; 3] },
    /// Band-limited value noise: smoothstep-interpolated random lattice.
    ValueNoise { cell: f64, base: f64, amp: f64, seed: u64 },
    Checker { size: f64, a: [f64; 3], b: [f64; 3] },
}

fn lattice_hash(seed: u64, ix: i64, iy: i64, channel: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ channel.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl Texture {
    pub fn eval(&self, u: f64, v: f64) -> Vector3<f64> {
        match self {
            Texture::Uniform(c) => Vector3::new(c[0], c[1], c[2]),
            Texture::Stripes { period, along_v, a, b } => {
                let coord = if *along_v { v } else { u };
                let w = 0.5 + 0.5 * (core::f64::consts::TAU * coord / period).sin();
                Vector3::new(
                    a[0] + (b[0] - a[0]) * w,
                    a[1] + (b[1] - a[1]) * w,
                    a[2] + (b[2] - a[2]) * w,
                )
            }
            Texture::ValueNoise { cell, base, amp, seed } => {
                // Two octaves so gradients exist at both pyramid scales.
                let mut out = Vector3::zeros();
                for (octave, (scale, weight)) in [(1.0, 0.68), (0.27, 0.32)].iter().enumerate() {
                    let cell = cell * scale;
                    let gx = u / cell;
                    let gy = v / cell;
                    let x0 = gx.floor();
                    let y0 = gy.floor();
                    let sx = gx - x0;
                    let sy = gy - y0;
                    // C1 smoothstep weights keep image gradients continuous.
                    let wx = sx * sx * (3.0 - 2.0 * sx);
                    let wy = sy * sy * (3.0 - 2.0 * sy);
                    let oseed = seed.wrapping_add(octave as u64 * 0x5151_5151);
                    for ch in 0..3u64 {
                        let n00 = lattice_hash(oseed, x0 as i64, y0 as i64, ch);
                        let n10 = lattice_hash(oseed, x0 as i64 + 1, y0 as i64, ch);
                        let n01 = lattice_hash(oseed, x0 as i64, y0 as i64 + 1, ch);
                        let n11 = lattice_hash(oseed, x0 as i64 + 1, y0 as i64 + 1, ch);
                        let val = n00 * (1.0 - wx) * (1.0 - wy)
                            + n10 * wx * (1.0 - wy)
                            + n01 * (1.0 - wx) * wy
                            + n11 * wx * wy;
                        out[ch as usize] += weight * (base + amp * val);
                    }
                }
                out
            }
            Texture::Checker { size, a, b } => {
                let k = ((u / size).floor() + (v / size).floor()) as i64;
                if k.rem_euclid(2) == 0 {
                    Vector3::new(a[0], a[1], a[2])
                } else {
                    Vector3::new(b[0], b[1], b[2])
                }
            }
        }
    }
}

/// Finite textured rectangle.
#[derive(Clone, Debug)]
pub struct PlaneModel {
    pub support: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// In-plane orthonormal axes (derived from the normal, deterministic).
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl PlaneModel {
    pub fn new(
        support: Vector3<f64>,
        normal: Vector3<f64>,
        half_u: f64,
        half_v: f64,
        texture: Texture,
    ) -> Self {
        let normal = normal.normalize();
        let basis = tangent_basis(&normal);
        Self {
            support,
            normal,
            axis_u: basis.column(0).into(),
            axis_v: basis.column(1).into(),
            half_u,
            half_v,
            texture,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub planes: Vec<PlaneModel>,
    /// Radiance scale applied to all textures (physical radiance units are
    /// arbitrary; this sets them relative to typical exposure times).
    pub ambient: f64,
}

pub struct RayHit {
    pub range: f64,
    pub plane: usize,
    pub radiance: Vector3<f64>,
}

impl WorldModel {
    /// Closest textured-plane intersection along `dir` (unit) from `origin`.
    pub fn cast_ray(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        min_range: f64,
    ) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (idx, plane) in self.planes.iter().enumerate() {
            let denom = plane.normal.dot(dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = plane.normal.dot(&(plane.support - origin)) / denom;
            if t <= min_range {
                continue;
            }
            if let Some(b) = &best {
                if t >= b.range {
                    continue;
                }
            }
            let hit = origin + dir * t;
            let rel = hit - plane.support;
            let u = rel.dot(&plane.axis_u);
            let v = rel.dot(&plane.axis_v);
            if u.abs() > plane.half_u || v.abs() > plane.half_v {
                continue;
            }
            best = Some(RayHit {
                range: t,
                plane: idx,
                radiance: plane.texture.eval(u, v) * self.ambient,
            });
        }
        best
    }

    /// Distance from `p` to the nearest plane surface (extents respected);
    /// the geometric oracle for scan tests.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for plane in &self.planes {
            let rel = p - plane.support;
            let u = rel.dot(&plane.axis_u);
            let v = rel.dot(&plane.axis_v);
            if u.abs() <= plane.half_u + 1e-6 && v.abs() <= plane.half_v + 1e-6 {
                best = best.min(plane.normal.dot(&rel).abs());
            }
        }
        best
    }

    /// Three textured orthogonal surfaces around the origin (floor below,
    /// two walls ahead), plus a back wall so full yaw sweeps keep geometry
    /// in view.
    pub fn corner_room(texture_seed: u64, ambient: f64) -> Self {
        let noise = |seed: u64| Texture::ValueNoise { cell: 0.25, base: 0.18, amp: 0.72, seed };
        WorldModel {
            planes: alloc::vec![
                PlaneModel::new(
                    Vector3::new(0.0, 0.0, -1.2),
                    Vector3::z(),
                    6.0,
                    6.0,
                    noise(texture_seed),
                ),
                PlaneModel::new(
                    Vector3::new(3.0, 0.0, 0.8),
                    Vector3::x(),
                    6.0,
                    2.5,
                    noise(texture_seed + 1),
                ),
                PlaneModel::new(
                    Vector3::new(0.0, 3.0, 0.8),
                    Vector3::y(),
                    6.0,
                    2.5,
                    noise(texture_seed + 2),
                ),
                PlaneModel::new(
                    Vector3::new(-3.0, 0.0, 0.8),
                    Vector3::x(),
                    6.0,
                    2.5,
                    noise(texture_seed + 3),
                ),
            ],
            ambient,
        }
    }

    /// Long corridor along +x: textured side walls, floor and end wall.
    pub fn corridor(texture_seed: u64, ambient: f64, length: f64, half_width: f64) -> Self {
        let noise = |seed: u64| Texture::ValueNoise { cell: 0.2, base: 0.18, amp: 0.72, seed };
        WorldModel {
            planes: alloc::vec![
                PlaneModel::new(
                    Vector3::new(length * 0.5 - 2.0, half_width, 0.8),
                    Vector3::y(),
                    length * 0.5 + 4.0,
                    2.5,
                    noise(texture_seed),
                ),
                PlaneModel::new(
                    Vector3::new(length * 0.5 - 2.0, -half_width, 0.8),
                    Vector3::y(),
                    length * 0.5 + 4.0,
                    2.5,
                    noise(texture_seed + 1),
                ),
                PlaneModel::new(
                    Vector3::new(length * 0.5 - 2.0, 0.0, -1.2),
                    Vector3::z(),
                    length * 0.5 + 4.0,
                    half_width + 1.0,
                    noise(texture_seed + 2),
                ),
                PlaneModel::new(
                    Vector3::new(length, 0.0, 0.8),
                    Vector3::x(),
                    half_width + 1.0,
                    2.5,
                    noise(texture_seed + 3),
                ),
            ],
            ambient,
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// offset + env(t) * (lin * t + amp * sin(2 pi freq t + phase)), with a C2
/// quintic ramp envelope after an exactly-static lead-in.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sinusoid {
    pub offset: f64,
    pub lin: f64,
    pub amp: f64,
    pub freq: f64,
    pub phase: f64,
}

impl Sinusoid {
    fn osc(&self, t: f64) -> (f64, f64, f64) {
        let w = core::f64::consts::TAU * self.freq;
        let s = (w * t + self.phase).sin();
        let c = (w * t + self.phase).cos();
        (
            self.lin * t + self.amp * s,
            self.lin + self.amp * w * c,
            -self.amp * w * w * s,
        )
    }
}

fn envelope(t: f64, lead: f64, ramp: f64) -> (f64, f64, f64) {
    if t < lead {
        return (0.0, 0.0, 0.0);
    }
    if ramp <= 0.0 || t >= lead + ramp {
        return (1.0, 0.0, 0.0);
    }
    let s = (t - lead) / ramp;
    let e = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let de = (30.0 * s * s - 60.0 * s * s * s + 30.0 * s * s * s * s) / ramp;
    let dde = (60.0 * s - 180.0 * s * s + 120.0 * s * s * s) / (ramp * ramp);
    (e, de, dde)
}

/// One rotation component: a sinusoidal angle around a fixed axis.
#[derive(Clone, Debug)]
pub struct RotationComponent {
    pub axis: Vector3<f64>,
    pub angle: Sinusoid,
}

/// Piecewise-smooth (C2) pose curve with closed-form body rates and
/// specific force. Motion starts after `static_lead` seconds and ramps in
/// over `ramp` seconds; pose(0) is the identity when offsets are zero.
#[derive(Clone, Debug)]
pub struct TrajectorySpec {
    pub translation: [Sinusoid; 3],
    pub rotation: Vec<RotationComponent>,
    pub base_rot: Rotation,
    pub duration: f64,
    pub static_lead: f64,
    pub ramp: f64,
    pub gravity: Vector3<f64>,
}

impl TrajectorySpec {
    pub fn static_pose(duration: f64) -> Self {
        Self {
            translation: [Sinusoid::default(); 3],
            rotation: Vec::new(),
            base_rot: Rotation::identity(),
            duration,
            static_lead: 0.0,
            ramp: 0.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }

    fn component(&self, axis: usize, t: f64) -> (f64, f64, f64) {
        let s = &self.translation[axis];
        let (e, de, dde) = envelope(t, self.static_lead, self.ramp);
        let (o, do_, ddo) = s.osc(t);
        (
            s.offset + e * o,
            de * o + e * do_,
            dde * o + 2.0 * de * do_ + e * ddo,
        )
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            self.component(0, t).0,
            self.component(1, t).0,
            self.component(2, t).0,
        )
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            self.component(0, t).1,
            self.component(1, t).1,
            self.component(2, t).1,
        )
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            self.component(0, t).2,
            self.component(1, t).2,
            self.component(2, t).2,
        )
    }

    /// Attitude: product of the component rotations applied to the base.
    pub fn attitude(&self, t: f64) -> Rotation {
        let (e, _, _) = envelope(t, self.static_lead, self.ramp);
        let mut rot = Rotation::identity();
        for comp in &self.rotation {
            let (o, _, _) = comp.angle.osc(t);
            let angle = comp.angle.offset + e * o;
            rot *= so3_exp(&(comp.axis.normalize() * angle));
        }
        rot * self.base_rot
    }

    /// Body-frame angular rate (what a gyro measures, bias- and noise-free).
    pub fn body_rate(&self, t: f64) -> Vector3<f64> {
        let (e, de, _) = envelope(t, self.static_lead, self.ramp);
        let mut omega_world = Vector3::zeros();
        let mut prefix = Rotation::identity();
        for comp in &self.rotation {
            let axis = comp.axis.normalize();
            let (o, do_, _) = comp.angle.osc(t);
            let angle = comp.angle.offset + e * o;
            let rate = de * o + e * do_;
            omega_world += prefix * axis * rate;
            prefix *= so3_exp(&(axis * angle));
        }
        self.attitude(t).transpose() * omega_world
    }

    /// Body-frame specific force (what an accelerometer measures).
    pub fn specific_force(&self, t: f64) -> Vector3<f64> {
        self.attitude(t).transpose() * (self.acceleration(t) - self.gravity)
    }
}

// ---------------------------------------------------------------------------
// Sensors
// ---------------------------------------------------------------------------

/// Constant initial biases; the random walk on top is seeded.
#[derive(Clone, Debug, Default)]
pub struct BiasSpec {
    pub gyro: Vector3<f64>,
    pub acc: Vector3<f64>,
}

/// Sample the IMU along the trajectory at `rate` Hz with the given noise
/// densities; exactly noise-free when all densities are zero.
pub fn sample_imu(
    traj: &TrajectorySpec,
    rate: f64,
    noise: &NoiseParams,
    bias: &BiasSpec,
    seed: u64,
) -> Vec<ImuSample> {
    let mut rng = SeededRng::substream(seed, 0x1111, 0);
    let n = (traj.duration * rate).round() as usize;
    let dt = 1.0 / rate;
    let sg = noise.gyro_noise_density * rate.sqrt();
    let sa = noise.acc_noise_density * rate.sqrt();
    let wg = noise.gyro_bias_rw * dt.sqrt();
    let wa = noise.acc_bias_rw * dt.sqrt();
    let mut bias_g = bias.gyro;
    let mut bias_a = bias.acc;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let mut gyro = traj.body_rate(t) + bias_g;
        let mut acc = traj.specific_force(t) + bias_a;
        if sg > 0.0 || sa > 0.0 {
            gyro += Vector3::new(rng.normal(), rng.normal(), rng.normal()) * sg;
            acc += Vector3::new(rng.normal(), rng.normal(), rng.normal()) * sa;
        }
        if wg > 0.0 || wa > 0.0 {
            bias_g += Vector3::new(rng.normal(), rng.normal(), rng.normal()) * wg;
            bias_a += Vector3::new(rng.normal(), rng.normal(), rng.normal()) * wa;
        }
        out.push(ImuSample { t, gyro, acc });
    }
    out
}

/// Ray layout of the scanner, in the LiDAR frame (x forward).
#[derive(Clone, Debug)]
pub enum LidarPattern {
    /// Regular azimuth/elevation raster (spinning-style coverage).
    Raster { n_az: usize, n_el: usize, fov_az: f64, fov_el: f64 },
    /// Lissajous rosette (solid-state-style coverage).
    Rosette { points: usize, fov_az: f64, fov_el: f64, freq_a: f64, freq_b: f64 },
}

impl LidarPattern {
    pub fn len(&self) -> usize {
        match self {
            LidarPattern::Raster { n_az, n_el, .. } => n_az * n_el,
            LidarPattern::Rosette { points, .. } => *points,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unit direction of ray `i`.
    pub fn direction(&self, i: usize) -> Vector3<f64> {
        let (az, el) = match self {
            LidarPattern::Raster { n_az, n_el, fov_az, fov_el } => {
                let row = i / n_az;
                let col = i % n_az;
                let fa = if *n_az > 1 { col as f64 / (*n_az - 1) as f64 - 0.5 } else { 0.0 };
                let fe = if *n_el > 1 { row as f64 / (*n_el - 1) as f64 - 0.5 } else { 0.0 };
                (fa * fov_az, fe * fov_el)
            }
            LidarPattern::Rosette { points, fov_az, fov_el, freq_a, freq_b } => {
                let s = i as f64 / *points as f64;
                (
                    0.5 * fov_az * (core::f64::consts::TAU * freq_a * s).sin(),
                    0.5 * fov_el * (core::f64::consts::TAU * freq_b * s).sin(),
                )
            }
        };
        Vector3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin())
    }
}

/// Render one LiDAR sweep over `[t0, t1]`: per-ray pose from the
/// trajectory (motion-true timestamps), closest plane hit, optional range
/// noise. Rays that miss every plane are dropped.
#[allow(clippy::too_many_arguments)]
pub fn render_scan(
    world: &WorldModel,
    traj: &TrajectorySpec,
    t0: f64,
    t1: f64,
    pattern: &LidarPattern,
    rot_ext: &Rotation,
    pos_ext: &Vector3<f64>,
    range_sigma: f64,
    seed: u64,
    scan_index: u64,
) -> LidarScan {
    let mut rng = SeededRng::substream(seed, 0x2222, scan_index);
    let m = pattern.len();
    let mut points = Vec::with_capacity(m);
    for i in 0..m {
        let t = t0 + (t1 - t0) * (i as f64 / m as f64);
        let rot_wi = traj.attitude(t);
        let pos_wi = traj.position(t);
        let rot_wl = rot_wi * rot_ext;
        let origin = rot_wi * pos_ext + pos_wi;
        let dir_l = pattern.direction(i);
        let dir_w = rot_wl * dir_l;
        if let Some(hit) = world.cast_ray(&origin, &dir_w, 0.05) {
            let range =
                hit.range + if range_sigma > 0.0 { rng.normal() * range_sigma } else { 0.0 };
            points.push(ScanPoint { pos: dir_l * range, t });
        }
    }
    LidarScan { points, t_end: t1, rot_ext: *rot_ext, pos_ext: *pos_ext }
}

/// Render a camera image from the given camera-to-world pose through the
/// photometric model at exposure `tau`. Sky pixels (no hit) get zero
/// radiance; intensity noise is added post-response and clamped to [0, 1].
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    world: &WorldModel,
    rot_wc: &Rotation,
    pos_wc: &Vector3<f64>,
    model: &PhotometricModel,
    tau: f64,
    width: usize,
    height: usize,
    intrinsics: &nalgebra::Vector4<f64>,
    intensity_sigma: f64,
    seed: u64,
    frame_index: u64,
) -> RawImage {
    let (fx, fy, cx, cy) = (intrinsics[0], intrinsics[1], intrinsics[2], intrinsics[3]);
    let mut data = alloc::vec![[0.0f64; 3]; width * height];
    // One seeded noise stream per row so rows can render in parallel with
    // a bit-stable result.
    let row = |y: usize, out: &mut [[f64; 3]]| {
        let mut rng = SeededRng::substream(
            seed,
            0x3333u64 ^ frame_index.wrapping_mul(0x9E37_79B9),
            y as u64,
        );
        for (x, px_out) in out.iter_mut().enumerate() {
            let dir_c = Vector3::new((x as f64 - cx) / fx, (y as f64 - cy) / fy, 1.0).normalize();
            let dir_w = rot_wc * dir_c;
            let radiance = world
                .cast_ray(pos_wc, &dir_w, 0.05)
                .map(|h| h.radiance)
                .unwrap_or_else(Vector3::zeros);
            let v = model.vignette.at(x, y);
            let (mut px, _) = render_pixel(&radiance, tau, v, model);
            if intensity_sigma > 0.0 {
                for c in 0..3 {
                    px[c] = (px[c] + rng.normal() * intensity_sigma).clamp(0.0, 1.0);
                }
            }
            *px_out = [px[0], px[1], px[2]];
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(width).enumerate().for_each(|(y, out)| row(y, out));
    }
    #[cfg(not(feature = "parallel"))]
    for y in 0..height {
        row(y, &mut data[y * width..(y + 1) * width]);
    }
    RawImage::new(width, height, data)
}

/// Camera-to-world pose at time `t` given the IMU trajectory and the
/// IMU-camera extrinsic.
pub fn camera_pose(
    traj: &TrajectorySpec,
    t: f64,
    rot_ext: &Rotation,
    pos_ext: &Vector3<f64>,
) -> (Rotation, Vector3<f64>) {
    let rot_wi = traj.attitude(t);
    (rot_wi * rot_ext, rot_wi * pos_ext + traj.position(t))
}

/// Conventional camera mount: optical axis along body +x, image x right
/// (-y body), image y down (-z body).
pub fn camera_forward_extrinsic() -> Rotation {
    Rotation::from_columns(&[-Vector3::y(), -Vector3::z(), Vector3::x()])
}

/// Per-pixel true surface radiance seen from a camera pose; `None` for sky
/// pixels. The oracle for photometric tests.
pub fn true_radiance_image(
    world: &WorldModel,
    rot_wc: &Rotation,
    pos_wc: &Vector3<f64>,
    width: usize,
    height: usize,
    intrinsics: &nalgebra::Vector4<f64>,
) -> Vec<Option<Vector3<f64>>> {
    let (fx, fy, cx, cy) = (intrinsics[0], intrinsics[1], intrinsics[2], intrinsics[3]);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dir_c = Vector3::new((x as f64 - cx) / fx, (y as f64 - cy) / fy, 1.0).normalize();
            let dir_w = rot_wc * dir_c;
            out.push(world.cast_ray(pos_wc, &dir_w, 0.05).map(|h| h.radiance));
        }
    }
    out
}
