//! Flat `key = value` configuration files and CLI overrides for
//! [`PipelineConfig`]. Lines starting with `#` are comments. Unknown keys
//! are errors so typos surface instead of silently running defaults.

use livo_core::PipelineConfig;

use crate::{PipelineError, Result};

/// Apply one `key = value` pair.
pub fn apply_key(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    fn num(key: &str, value: &str) -> Result<f64> {
        value.trim().parse().map_err(|_| PipelineError::BadValue {
            key: key.into(),
            value: value.into(),
        })
    }
    fn int(key: &str, value: &str) -> Result<usize> {
        value.trim().parse().map_err(|_| PipelineError::BadValue {
            key: key.into(),
            value: value.into(),
        })
    }
    fn flag(key: &str, value: &str) -> Result<bool> {
        match value.trim() {
            "true" | "1" | "on" => Ok(true),
            "false" | "0" | "off" => Ok(false),
            _ => Err(PipelineError::BadValue { key: key.into(), value: value.into() }),
        }
    }

    match key {
        "voxel_size" => cfg.voxel_size = num(key, value)?,
        "map_resolution" => cfg.map_resolution = num(key, value)?,
        "activation_window" => cfg.activation_window = num(key, value)?,
        "knn_k" => cfg.knn_k = int(key, value)?,
        "knn_r_max" => cfg.knn_r_max = num(key, value)?,
        "max_plane_radius" => cfg.max_plane_radius = num(key, value)?,
        "plane_eig_ratio" => cfg.plane_eig_ratio = num(key, value)?,
        "plane_max_residual" => cfg.plane_max_residual = num(key, value)?,
        "gyro_noise_density" => cfg.imu_noise.gyro_noise_density = num(key, value)?,
        "acc_noise_density" => cfg.imu_noise.acc_noise_density = num(key, value)?,
        "gyro_bias_rw" => cfg.imu_noise.gyro_bias_rw = num(key, value)?,
        "acc_bias_rw" => cfg.imu_noise.acc_bias_rw = num(key, value)?,
        "imu_rate" => cfg.imu_rate = num(key, value)?,
        "exposure_rw_rel" => cfg.exposure_rw_rel = num(key, value)?,
        "time_offset_rw" => cfg.time_offset_rw = num(key, value)?,
        "gravity_init_window" => cfg.gravity_init_window = num(key, value)?,
        "lidar_sigma" => cfg.lidar_sigma = num(key, value)?,
        "max_scan_residuals" => cfg.max_scan_residuals = int(key, value)?,
        "lio_min_correspondences" => cfg.lio_min_correspondences = int(key, value)?,
        "insert_gate_sigmas" => cfg.insert_gate_sigmas = num(key, value)?,
        "max_update_iterations" => cfg.max_update_iterations = int(key, value)?,
        "converge_rot" => cfg.converge_rot = num(key, value)?,
        "converge_pos" => cfg.converge_pos = num(key, value)?,
        "lk_levels" => cfg.lk_levels = int(key, value)?,
        "lk_half_win" => cfg.lk_half_win = int(key, value)?,
        "lk_iterations" => cfg.lk_iterations = int(key, value)?,
        "lk_min_eig" => cfg.lk_min_eig = num(key, value)?,
        "lk_max_residual" => cfg.lk_max_residual = num(key, value)?,
        "vio_min_points" => cfg.vio_min_points = int(key, value)?,
        "huber_px" => cfg.huber_px = num(key, value)?,
        "huber_radiance" => cfg.huber_radiance = num(key, value)?,
        "intensity_sigma" => cfg.intensity_sigma = num(key, value)?,
        "pose_pixel_sigma" => cfg.pose_pixel_sigma = num(key, value)?,
        "sigma_illumination" => cfg.sigma_illumination = num(key, value)?,
        "min_depth" => cfg.min_depth = num(key, value)?,
        "tracked_spacing_px" => cfg.tracked_spacing_px = num(key, value)?,
        "reproj_outlier_px" => cfg.reproj_outlier_px = num(key, value)?,
        "radiance_outlier_sigma" => cfg.radiance_outlier_sigma = num(key, value)?,
        "estimate_exposure" => cfg.estimate_exposure = flag(key, value)?,
        "inv_exposure_init" => cfg.inv_exposure_init = num(key, value)?,
        "enable_vio" => cfg.enable_vio = flag(key, value)?,
        _ => return Err(PipelineError::UnknownKey(key.into())),
    }
    Ok(())
}

/// Parse a whole config file into `cfg` (later keys win).
pub fn apply_text(cfg: &mut PipelineConfig, text: &str, origin: &str) -> Result<()> {
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
        apply_key(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

/// `--set key=value` override from the CLI.
pub fn apply_override(cfg: &mut PipelineConfig, spec: &str) -> Result<()> {
    let Some((key, value)) = spec.split_once('=') else {
        return Err(PipelineError::parse("--set", format!("`{spec}`: expected key=value")));
    };
    apply_key(cfg, key.trim(), value.trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_rejects_unknown() {
        let mut cfg = PipelineConfig::default();
        apply_text(
            &mut cfg,
            "# comment\nvoxel_size = 0.2\nenable_vio = false\nknn_k = 7\n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.voxel_size, 0.2);
        assert!(!cfg.enable_vio);
        assert_eq!(cfg.knn_k, 7);
        assert!(matches!(
            apply_text(&mut cfg, "not_a_key = 1\n", "test"),
            Err(PipelineError::UnknownKey(_))
        ));
        assert!(apply_override(&mut cfg, "lidar_sigma=0.01").is_ok());
        assert_eq!(cfg.lidar_sigma, 0.01);
    }
}
