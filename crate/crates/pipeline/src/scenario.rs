//! Scenario descriptions: a named world + trajectory + sensor setup that
//! fully determines a synthetic sequence given a seed. Scenarios are built
//! from presets, optionally overridden through the same `key = value`
//! grammar as the pipeline config.

use livo_core::config::NoiseParams;
use livo_core::imu::ImuSample;
use livo_core::lio::LidarScan;
use livo_core::manifold::Rotation;
use livo_core::photometric::{PhotometricModel, RawImage, ResponseCurve, VignetteMap};
use livo_core::sim::{
    self, BiasSpec, LidarPattern, RotationComponent, Sinusoid, TrajectorySpec, WorldModel,
};
use nalgebra::Vector3;

use crate::{EventDesc, PipelineError, Result, SensorMeta, SequenceSource};

#[derive(Clone, Debug)]
pub enum WorldKind {
    CornerRoom,
    Corridor { length: f64, half_width: f64 },
}

#[derive(Clone, Debug)]
pub enum CrfSpec {
    Identity,
    /// Concave power-law response, exponent < 1 brightens darks.
    Gamma(f64),
    Random(u64),
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration: f64,
    pub world_kind: WorldKind,
    pub ambient: f64,
    pub texture_seed: u64,
    pub traj: TrajectorySpec,
    pub lidar_rate: f64,
    pub pattern: LidarPattern,
    pub lidar_sigma: f64,
    pub intensity_sigma: f64,
    pub imu_noise: NoiseParams,
    pub bias: BiasSpec,
    pub meta: SensorMeta,
    pub crf: CrfSpec,
    pub vignette_strength: f64,
    /// Exposure profile: tau(t) = base + amp * sin(2 pi t / period).
    pub tau_base: f64,
    pub tau_amp: f64,
    pub tau_period: f64,
}

fn zero_noise() -> NoiseParams {
    NoiseParams {
        gyro_noise_density: 0.0,
        acc_noise_density: 0.0,
        gyro_bias_rw: 0.0,
        acc_bias_rw: 0.0,
    }
}

impl Scenario {
    /// Textured three-wall room, wandering handheld-style loop. Noise-free
    /// by default; see `with_nominal_noise`.
    pub fn corner_room() -> Self {
        let traj = TrajectorySpec {
            translation: [
                Sinusoid { amp: 1.0, freq: 1.0 / 9.0, ..Default::default() },
                Sinusoid { amp: 1.0, freq: 1.0 / 7.0, phase: 1.3, ..Default::default() },
                Sinusoid { amp: 0.3, freq: 1.0 / 8.0, phase: 0.5, ..Default::default() },
            ],
            rotation: vec![
                RotationComponent {
                    axis: Vector3::z(),
                    angle: Sinusoid { amp: 0.4, freq: 1.0 / 15.0, ..Default::default() },
                },
                RotationComponent {
                    axis: Vector3::y(),
                    angle: Sinusoid { amp: 0.15, freq: 1.0 / 11.0, phase: 0.9, ..Default::default() },
                },
            ],
            base_rot: livo_core::manifold::so3_exp(
                &(Vector3::z() * core::f64::consts::FRAC_PI_4),
            ),
            duration: 60.0,
            static_lead: 1.0,
            ramp: 2.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        };
        Scenario {
            name: "corner_room".into(),
            seed: 1,
            duration: 60.0,
            world_kind: WorldKind::CornerRoom,
            ambient: 300.0,
            texture_seed: 40,
            traj,
            lidar_rate: 10.0,
            pattern: LidarPattern::Rosette {
                points: 5000,
                fov_az: 1.2,
                fov_el: 1.2,
                freq_a: 37.0,
                freq_b: 41.0,
            },
            lidar_sigma: 0.0,
            intensity_sigma: 0.0,
            imu_noise: zero_noise(),
            bias: BiasSpec::default(),
            meta: SensorMeta::default(),
            crf: CrfSpec::Gamma(1.0 / 2.2),
            vignette_strength: 0.4,
            tau_base: 0.001,
            tau_amp: 0.0,
            tau_period: 20.0,
        }
    }

    /// Nominal sensor noise: 2 cm LiDAR, consumer-grade IMU, 1/255 image
    /// noise, small initial biases.
    pub fn with_nominal_noise(mut self) -> Self {
        self.lidar_sigma = 0.02;
        self.intensity_sigma = 1.0 / 255.0;
        self.imu_noise = NoiseParams::default();
        self.bias = BiasSpec {
            gyro: Vector3::new(0.002, -0.0015, 0.001),
            acc: Vector3::new(0.02, -0.015, 0.01),
        };
        self
    }

    /// Corridor run where the (side-mounted, narrow) LiDAR sees a single
    /// wall while the camera keeps texture in view: LiDAR-degenerate but
    /// visually constrained.
    pub fn corridor_degenerate() -> Self {
        let mut s = Scenario::corner_room().with_nominal_noise();
        s.name = "corridor".into();
        s.duration = 16.0;
        s.world_kind = WorldKind::Corridor { length: 25.0, half_width: 1.5 };
        s.traj = TrajectorySpec {
            translation: [
                Sinusoid { lin: 1.0, ..Default::default() },
                Sinusoid { amp: 0.05, freq: 0.3, ..Default::default() },
                Sinusoid { amp: 0.04, freq: 0.37, phase: 0.8, ..Default::default() },
            ],
            rotation: vec![],
            base_rot: Rotation::identity(),
            duration: 16.0,
            static_lead: 1.0,
            ramp: 2.0,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        };
        // Side-mounted narrow scanner: only the +y wall is ever visible.
        s.meta.lidar_rot_ext =
            livo_core::manifold::so3_exp(&(Vector3::z() * core::f64::consts::FRAC_PI_2));
        s.pattern = LidarPattern::Raster { n_az: 60, n_el: 34, fov_az: 0.5, fov_el: 0.5 };
        // Camera yawed toward the same wall so its texture fills the frame.
        s.meta.cam_rot_ext =
            livo_core::manifold::so3_exp(&(Vector3::z() * 0.7)) * sim::camera_forward_extrinsic();
        // A real accelerometer offset: unobservable along the corridor for
        // the LiDAR-only system.
        s.bias.acc = Vector3::new(0.05, -0.02, 0.01);
        s
    }

    /// Exposure-estimation run: auto-exposure style sinusoidal tau in
    /// [1 ms, 3 ms], nominal noise, textured room.
    pub fn exposure_sweep() -> Self {
        let mut s = Scenario::corner_room().with_nominal_noise();
        s.name = "exposure_sweep".into();
        s.duration = 30.0;
        s.traj.duration = 30.0;
        s.tau_base = 0.002;
        s.tau_amp = 0.001;
        s.tau_period = 20.0;
        s
    }

    /// Heavy-load variant: ~20k points per scan, 15 Hz camera. Noise-free
    /// streams: this is the timing benchmark, not an accuracy scenario.
    pub fn throughput() -> Self {
        let mut s = Scenario::corner_room();
        s.name = "throughput".into();
        s.duration = 40.0;
        s.traj.duration = 40.0;
        s.pattern = LidarPattern::Rosette {
            points: 20_000,
            fov_az: 1.2,
            fov_el: 1.2,
            freq_a: 37.0,
            freq_b: 41.0,
        };
        s.meta.cam_rate = 15.0;
        s
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "corner_room" => Some(Self::corner_room()),
            "corner_room_noisy" => Some(Self::corner_room().with_nominal_noise()),
            "corridor" => Some(Self::corridor_degenerate()),
            "exposure_sweep" => Some(Self::exposure_sweep()),
            "throughput" => Some(Self::throughput()),
            _ => None,
        }
    }

    /// Parse a scenario file: a `scenario = <preset>` line selects the
    /// base, remaining keys override it.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut scenario: Option<Scenario> = None;
        let mut overrides: Vec<(String, String)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(PipelineError::parse(
                    origin,
                    format!("line {}: expected `key = value`", idx + 1),
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "scenario" {
                scenario = Some(Scenario::preset(value).ok_or_else(|| {
                    PipelineError::parse(origin, format!("unknown scenario preset `{value}`"))
                })?);
            } else {
                overrides.push((key.into(), value.into()));
            }
        }
        let mut scenario = scenario.ok_or_else(|| {
            PipelineError::parse(origin, "missing `scenario = <preset>` line")
        })?;
        for (key, value) in overrides {
            scenario.apply_key(&key, &value)?;
        }
        Ok(scenario)
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || PipelineError::BadValue { key: key.into(), value: value.into() };
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        match key {
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            "duration" => {
                self.duration = num(value)?;
                self.traj.duration = self.duration;
            }
            "lidar_rate" => self.lidar_rate = num(value)?,
            "cam_rate" => self.meta.cam_rate = num(value)?,
            "imu_rate" => self.meta.imu_rate = num(value)?,
            "lidar_sigma" => self.lidar_sigma = num(value)?,
            "intensity_sigma" => self.intensity_sigma = num(value)?,
            "ambient" => self.ambient = num(value)?,
            "texture_seed" => self.texture_seed = value.trim().parse().map_err(|_| bad())?,
            "tau_base" => self.tau_base = num(value)?,
            "tau_amp" => self.tau_amp = num(value)?,
            "tau_period" => self.tau_period = num(value)?,
            "vignette" => self.vignette_strength = num(value)?,
            // Image size overrides rescale the intrinsics to keep the
            // field of view.
            "width" => {
                let w: usize = value.trim().parse().map_err(|_| bad())?;
                let scale = w as f64 / self.meta.width as f64;
                self.meta.intrinsics[0] *= scale;
                self.meta.intrinsics[2] *= scale;
                self.meta.width = w;
            }
            "height" => {
                let h: usize = value.trim().parse().map_err(|_| bad())?;
                let scale = h as f64 / self.meta.height as f64;
                self.meta.intrinsics[1] *= scale;
                self.meta.intrinsics[3] *= scale;
                self.meta.height = h;
            }
            "imu_noise" => match value {
                "none" => self.imu_noise = zero_noise(),
                "nominal" => self.imu_noise = NoiseParams::default(),
                _ => return Err(bad()),
            },
            "crf" => {
                self.crf = if value == "identity" {
                    CrfSpec::Identity
                } else if let Some(g) = value.strip_prefix("gamma:") {
                    CrfSpec::Gamma(g.parse().map_err(|_| bad())?)
                } else if let Some(s) = value.strip_prefix("random:") {
                    CrfSpec::Random(s.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                };
            }
            "pattern" => {
                self.pattern = if let Some(rest) = value.strip_prefix("raster:") {
                    let v: Vec<f64> = rest
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if v.len() != 4 {
                        return Err(bad());
                    }
                    LidarPattern::Raster {
                        n_az: v[0] as usize,
                        n_el: v[1] as usize,
                        fov_az: v[2],
                        fov_el: v[3],
                    }
                } else if let Some(rest) = value.strip_prefix("rosette:") {
                    let v: Vec<f64> = rest
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if v.len() != 3 {
                        return Err(bad());
                    }
                    LidarPattern::Rosette {
                        points: v[0] as usize,
                        fov_az: v[1],
                        fov_el: v[2],
                        freq_a: 37.0,
                        freq_b: 41.0,
                    }
                } else {
                    return Err(bad());
                };
            }
            _ => return Err(PipelineError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn tau_at(&self, t: f64) -> f64 {
        self.tau_base + self.tau_amp * (core::f64::consts::TAU * t / self.tau_period).sin()
    }

    pub fn world(&self) -> WorldModel {
        match self.world_kind {
            WorldKind::CornerRoom => WorldModel::corner_room(self.texture_seed, self.ambient),
            WorldKind::Corridor { length, half_width } => {
                WorldModel::corridor(self.texture_seed, self.ambient, length, half_width)
            }
        }
    }

    pub fn photometric(&self) -> PhotometricModel {
        let curve = |ch: u64| match &self.crf {
            CrfSpec::Identity => ResponseCurve::identity(),
            CrfSpec::Gamma(g) => ResponseCurve::gamma(*g),
            CrfSpec::Random(seed) => {
                let mut rng = livo_core::rng::SeededRng::substream(*seed, 0x4444, ch);
                ResponseCurve::random_monotone(&mut rng)
            }
        };
        PhotometricModel {
            crf: [curve(0), curve(1), curve(2)],
            vignette: if self.vignette_strength > 0.0 {
                VignetteMap::radial(self.meta.width, self.meta.height, self.vignette_strength)
            } else {
                VignetteMap::uniform(self.meta.width, self.meta.height)
            },
        }
    }

    /// Materialize the deterministic sequence.
    pub fn build(&self) -> SyntheticSequence {
        let world = self.world();
        let model = self.photometric();
        let imu = sim::sample_imu(
            &self.traj,
            self.meta.imu_rate,
            &self.imu_noise,
            &self.bias,
            self.seed,
        );
        let n_scans = (self.duration * self.lidar_rate).floor() as usize;
        let n_images = (self.duration * self.meta.cam_rate).floor() as usize;
        let image_times: Vec<f64> =
            (0..n_images).map(|j| (j + 1) as f64 / self.meta.cam_rate).collect();
        SyntheticSequence {
            scenario: self.clone(),
            world,
            model,
            imu,
            n_scans,
            image_times,
        }
    }

    /// Ground-truth IMU pose in the world frame.
    pub fn gt_pose(&self, t: f64) -> (Rotation, Vector3<f64>) {
        (self.traj.attitude(t), self.traj.position(t))
    }

    /// Ground-truth pose relative to the initial pose: the estimator
    /// defines its own origin at startup, so drift checks compare against
    /// this.
    pub fn gt_pose_relative(&self, t: f64) -> (Rotation, Vector3<f64>) {
        let (rot0, pos0) = self.gt_pose(0.0);
        let (rot, pos) = self.gt_pose(t);
        (rot0.transpose() * rot, rot0.transpose() * (pos - pos0))
    }

    /// Ground-truth trajectory sampled at `rate` Hz.
    pub fn gt_trajectory(&self, rate: f64) -> Vec<crate::eval::TrajPoint> {
        let n = (self.duration * rate) as usize;
        (0..=n)
            .map(|k| {
                let t = k as f64 / rate;
                let (rot, pos) = self.gt_pose(t);
                crate::eval::TrajPoint::from_pose(t, &rot, &pos)
            })
            .collect()
    }

    /// Path length of the ground-truth trajectory.
    pub fn gt_path_length(&self) -> f64 {
        let mut len = 0.0;
        let dt = 0.01;
        let n = (self.duration / dt) as usize;
        let mut prev = self.traj.position(0.0);
        for k in 1..=n {
            let p = self.traj.position(k as f64 * dt);
            len += (p - prev).norm();
            prev = p;
        }
        len
    }
}

/// Lazily rendered synthetic sequence; any scan or image can be produced in
/// isolation, bit-identically, from (scenario, seed, index).
pub struct SyntheticSequence {
    pub scenario: Scenario,
    pub world: WorldModel,
    model: PhotometricModel,
    imu: Vec<ImuSample>,
    n_scans: usize,
    image_times: Vec<f64>,
}

impl SyntheticSequence {
    pub fn image_count(&self) -> usize {
        self.image_times.len()
    }

    /// 8-bit quantized camera output (what a real sensor and the on-disk
    /// format deliver).
    pub fn image_rgb8(&self, index: usize) -> (Vec<u8>, f64) {
        let t = self.image_times[index];
        let s = &self.scenario;
        let (rot_wc, pos_wc) =
            sim::camera_pose(&s.traj, t, &s.meta.cam_rot_ext, &s.meta.cam_pos_ext);
        let raw = sim::render_image(
            &self.world,
            &rot_wc,
            &pos_wc,
            &self.model,
            s.tau_at(t),
            s.meta.width,
            s.meta.height,
            &s.meta.intrinsics,
            s.intensity_sigma,
            s.seed,
            index as u64,
        );
        (raw_to_rgb8(&raw), t)
    }
}

/// Quantize normalized intensities to the 8-bit camera output.
pub fn raw_to_rgb8(raw: &RawImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.width * raw.height * 3);
    for px in raw.data() {
        for c in 0..3 {
            out.push((px[c] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

impl SequenceSource for SyntheticSequence {
    fn meta(&self) -> &SensorMeta {
        &self.scenario.meta
    }

    fn model(&self) -> &PhotometricModel {
        &self.model
    }

    fn imu(&self) -> &[ImuSample] {
        &self.imu
    }

    fn events(&self) -> Vec<EventDesc> {
        let mut events = Vec::new();
        for i in 0..self.n_scans {
            events.push(EventDesc::Scan {
                index: i,
                t: (i + 1) as f64 / self.scenario.lidar_rate,
            });
        }
        for (j, t) in self.image_times.iter().enumerate() {
            events.push(EventDesc::Image { index: j, t: *t });
        }
        crate::order_events(events)
    }

    fn scan(&mut self, index: usize) -> Result<LidarScan> {
        let s = &self.scenario;
        let t0 = index as f64 / s.lidar_rate;
        let t1 = (index + 1) as f64 / s.lidar_rate;
        Ok(sim::render_scan(
            &self.world,
            &s.traj,
            t0,
            t1,
            &s.pattern,
            &s.meta.lidar_rot_ext,
            &s.meta.lidar_pos_ext,
            s.lidar_sigma,
            s.seed,
            index as u64,
        ))
    }

    fn image(&mut self, index: usize) -> Result<(RawImage, f64)> {
        let (bytes, t) = self.image_rgb8(index);
        Ok((
            RawImage::from_rgb8(self.scenario.meta.width, self.scenario.meta.height, &bytes),
            t,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parsing_and_overrides() {
        let text = "scenario = corner_room\nduration = 5\nlidar_sigma = 0.02\ncrf = gamma:0.45\n";
        let s = Scenario::from_text(text, "test").unwrap();
        assert_eq!(s.duration, 5.0);
        assert_eq!(s.lidar_sigma, 0.02);
        assert!(matches!(s.crf, CrfSpec::Gamma(_)));
        assert!(Scenario::from_text("duration = 5\n", "test").is_err());
        assert!(Scenario::from_text("scenario = nope\n", "test").is_err());
    }

    #[test]
    fn events_are_ordered_lidar_first_on_ties() {
        let mut s = Scenario::corner_room();
        s.duration = 2.0;
        s.traj.duration = 2.0;
        // 10 Hz lidar and 10 Hz camera share timestamps.
        let seq = s.build();
        let events = seq.events();
        let mut last_t = 0.0;
        for pair in events.windows(2) {
            assert!(pair[1].t() >= pair[0].t());
            if pair[0].t() == pair[1].t() {
                assert!(matches!(pair[0], EventDesc::Scan { .. }));
                assert!(matches!(pair[1], EventDesc::Image { .. }));
            }
            last_t = pair[1].t();
        }
        assert!(last_t <= 2.0 + 1e-9);
    }

    #[test]
    fn corner_room_path_length_near_fifty_meters() {
        let s = Scenario::corner_room();
        let len = s.gt_path_length();
        assert!((40.0..70.0).contains(&len), "path length {len}");
    }
}
