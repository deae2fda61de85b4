//! All tunable parameters of the estimator in one flat struct.
//!
//! The pipeline crate parses `key = value` config files and CLI overrides
//! into this; every field has the documented default so a default-constructed
//! config runs every sequence.

/// IMU continuous-time noise densities (SI units, per sqrt(Hz)) plus the
/// random-walk densities of the slowly drifting scalar states.
#[derive(Clone, Debug)]
pub struct NoiseParams {
    /// Gyroscope white noise density (rad/s/sqrt(Hz)).
    pub gyro_noise_density: f64,
    /// Accelerometer white noise density (m/s^2/sqrt(Hz)).
    pub acc_noise_density: f64,
    /// Gyroscope bias random walk (rad/s^2/sqrt(Hz)).
    pub gyro_bias_rw: f64,
    /// Accelerometer bias random walk (m/s^3/sqrt(Hz)).
    pub acc_bias_rw: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gyro_noise_density: 2e-4,
            acc_noise_density: 2e-3,
            gyro_bias_rw: 1e-5,
            acc_bias_rw: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    // Map
    /// Voxel edge length (m).
    pub voxel_size: f64,
    /// Minimum spacing kept between map points (m).
    pub map_resolution: f64,
    /// Voxels stay activated this long after an append (s).
    pub activation_window: f64,
    /// Neighbors used for plane fitting.
    pub knn_k: usize,
    /// Correspondence search radius (m).
    pub knn_r_max: f64,
    /// Neighbors farther than this from the fitted centroid invalidate the plane (m).
    pub max_plane_radius: f64,
    /// Plane validity: smallest/middle scatter eigenvalue ratio bound.
    pub plane_eig_ratio: f64,
    /// Plane validity: max point-to-plane residual of the neighbors (m).
    pub plane_max_residual: f64,

    // IMU
    pub imu_noise: NoiseParams,
    /// Nominal IMU rate (Hz); coverage gaps above twice the nominal period fail.
    pub imu_rate: f64,
    /// Relative random-walk PSD of the inverse exposure (fraction^2 per s).
    pub exposure_rw_rel: f64,
    /// Random-walk PSD of the camera time offset (s^2 per s).
    pub time_offset_rw: f64,
    /// Accelerometer samples averaged for gravity initialization (s).
    pub gravity_init_window: f64,

    // LIO
    /// Isotropic LiDAR point noise (m, 1 sigma).
    pub lidar_sigma: f64,
    /// Residual cap per scan; scans are uniformly subsampled above it.
    pub max_scan_residuals: usize,
    /// Below this many valid correspondences the update is flagged degenerate.
    pub lio_min_correspondences: usize,
    /// Scan points with an existing map neighbor within this many sigmas of
    /// the LiDAR noise are treated as re-observations of known surface:
    /// their voxels are re-activated but no new point is stored. Keeps the
    /// map spacing above the sensor noise so noise cannot ratchet the map.
    pub insert_gate_sigmas: f64,
    /// Iterated-update cap shared by LIO and both VIO updates.
    pub max_update_iterations: usize,
    /// Convergence threshold on the rotation part of the update (rad).
    pub converge_rot: f64,
    /// Convergence threshold on the position part of the update (m).
    pub converge_pos: f64,

    // VIO
    /// Pyramid levels for the point tracker.
    pub lk_levels: usize,
    /// Tracker window is (2*lk_half_win + 1)^2 pixels.
    pub lk_half_win: usize,
    /// Tracker iterations per level.
    pub lk_iterations: usize,
    /// Minimum normal-matrix eigenvalue per pixel before a patch counts as
    /// textureless. Corrected-image luminance is exposure-normalized (values
    /// around 0.05..2), so this sits well below squared gradients of real
    /// texture at that scale.
    pub lk_min_eig: f64,
    /// Mean absolute photometric residual above which a track is dropped.
    pub lk_max_residual: f64,
    /// Minimum usable points for the frame-to-frame / frame-to-map updates.
    pub vio_min_points: usize,
    /// Huber threshold on reprojection residuals (px).
    pub huber_px: f64,
    /// Huber threshold on radiance residuals, in exposure-normalized units.
    pub huber_radiance: f64,
    /// Image intensity noise model (normalized intensity, 1 sigma).
    pub intensity_sigma: f64,
    /// Projection jitter fed into the radiance noise model (px, 1 sigma).
    pub pose_pixel_sigma: f64,
    /// Illumination-change random walk PSD (radiance^2 per s, exposure-normalized).
    pub sigma_illumination: f64,
    /// Points closer than this to the camera are rejected (m).
    pub min_depth: f64,
    /// Tracked-point spacing maintained in the image (px).
    pub tracked_spacing_px: f64,
    /// Reprojection error above which a tracked point is dropped (px).
    pub reproj_outlier_px: f64,
    /// Radiance error above this many sigmas of its noise model drops the point.
    pub radiance_outlier_sigma: f64,
    /// Estimate inverse exposure online; when false it stays at `inv_exposure_init`.
    pub estimate_exposure: bool,
    /// Initial inverse exposure (1/s); the default assumes 1 ms.
    pub inv_exposure_init: f64,
    /// Run the VIO at all; when false the pipeline is LiDAR-inertial only.
    pub enable_vio: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            map_resolution: 0.01,
            activation_window: 1.0,
            knn_k: 5,
            knn_r_max: 1.0,
            max_plane_radius: 0.5,
            plane_eig_ratio: 0.1,
            plane_max_residual: 0.05,
            imu_noise: NoiseParams::default(),
            imu_rate: 200.0,
            exposure_rw_rel: 0.04,
            time_offset_rw: 1e-6,
            gravity_init_window: 0.5,
            lidar_sigma: 0.02,
            max_scan_residuals: 2000,
            lio_min_correspondences: 10,
            insert_gate_sigmas: 2.0,
            max_update_iterations: 5,
            converge_rot: 1e-6,
            converge_pos: 1e-5,
            lk_levels: 3,
            lk_half_win: 5,
            lk_iterations: 10,
            lk_min_eig: 2e-6,
            lk_max_residual: 0.15,
            vio_min_points: 8,
            huber_px: 1.5,
            huber_radiance: 0.1,
            intensity_sigma: 1.0 / 255.0,
            pose_pixel_sigma: 1.0,
            sigma_illumination: 1e-4,
            min_depth: 0.01,
            tracked_spacing_px: 50.0,
            reproj_outlier_px: 3.0,
            radiance_outlier_sigma: 3.0,
            estimate_exposure: true,
            inv_exposure_init: 1000.0,
            enable_vio: true,
        }
    }
}
