//! Trajectory format (TUM), absolute position error with rigid alignment,
//! and the map-to-image photometric error protocol.

use std::fmt::Write as _;
use std::path::Path;

use livo_core::manifold::Rotation;
use livo_core::map::VoxelMap;
use livo_core::photometric::{render_pixel, PhotometricModel, RawImage};
use livo_core::vio::project;
use livo_core::{FullState, PipelineConfig};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::{PipelineError, Result};

/// One trajectory sample: timestamp, position and orientation quaternion
/// (x, y, z, w) as in the TUM format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajPoint {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub quat: [f64; 4],
}

impl TrajPoint {
    pub fn from_pose(t: f64, rot: &Rotation, pos: &Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rot));
        TrajPoint { t, pos: *pos, quat: [q.i, q.j, q.k, q.w] }
    }

    pub fn rotation(&self) -> Rotation {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            self.quat[3],
            self.quat[0],
            self.quat[1],
            self.quat[2],
        ));
        *q.to_rotation_matrix().matrix()
    }
}

/// TUM text form: `t x y z qx qy qz qw`, one line per pose, shortest
/// round-trip float formatting (re-parsing is bit-exact).
pub fn format_tum(traj: &[TrajPoint]) -> String {
    let mut out = String::new();
    for p in traj {
        let _ = writeln!(
            out,
            "{:?} {} {} {} {} {} {} {}",
            p.t, p.pos.x, p.pos.y, p.pos.z, p.quat[0], p.quat[1], p.quat[2], p.quat[3]
        );
    }
    out
}

pub fn parse_tum(text: &str, origin: &str) -> Result<Vec<TrajPoint>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| {
            PipelineError::parse(origin, format!("line {}: {e}", idx + 1))
        })?;
        if vals.len() != 8 {
            return Err(PipelineError::parse(
                origin,
                format!("line {}: expected 8 fields, got {}", idx + 1, vals.len()),
            ));
        }
        out.push(TrajPoint {
            t: vals[0],
            pos: Vector3::new(vals[1], vals[2], vals[3]),
            quat: [vals[4], vals[5], vals[6], vals[7]],
        });
    }
    Ok(out)
}

pub fn write_tum(path: &Path, traj: &[TrajPoint]) -> Result<()> {
    std::fs::write(path, format_tum(traj))
        .map_err(|e| PipelineError::io(path.display().to_string(), e))
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajPoint>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    parse_tum(&text, &path.display().to_string())
}

#[derive(Clone, Copy, Debug)]
pub struct ApeStats {
    pub rmse: f64,
    pub mean: f64,
    pub max: f64,
    pub matched: usize,
}

/// Absolute position error: nearest-neighbor time association within
/// `max_dt`, rigid (rotation + translation) least-squares alignment of the
/// estimate onto the ground truth, then position residual statistics.
pub fn evaluate_ape(
    est: &[TrajPoint],
    gt: &[TrajPoint],
    max_dt: f64,
) -> std::result::Result<ApeStats, String> {
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>)> = Vec::new();
    let mut k = 0usize;
    for e in est {
        while k + 1 < gt.len() && (gt[k + 1].t - e.t).abs() <= (gt[k].t - e.t).abs() {
            k += 1;
        }
        if gt.is_empty() || (gt[k].t - e.t).abs() > max_dt {
            continue;
        }
        pairs.push((e.pos, gt[k].pos));
    }
    if pairs.len() < 10 {
        return Err(format!("only {} matched poses", pairs.len()));
    }

    let n = pairs.len() as f64;
    let mean_e: Vector3<f64> = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let mean_g: Vector3<f64> = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in &pairs {
        h += (e - mean_e) * (g - mean_g).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (vt.transpose() * u.transpose()).determinant().signum();
    let rot = vt.transpose() * d * u.transpose();
    let trans = mean_g - rot * mean_e;

    let mut sum2 = 0.0;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (e, g) in &pairs {
        let err = (rot * e + trans - g).norm();
        sum2 += err * err;
        sum += err;
        max = max.max(err);
    }
    Ok(ApeStats {
        rmse: (sum2 / n).sqrt(),
        mean: sum / n,
        max,
        matched: pairs.len(),
    })
}

/// Per-frame mean absolute photometric error of the reconstructed map: every
/// radiance-initialized point is rendered into the frame through the
/// estimated state (pose, intrinsics, exposure) and compared against the
/// observed raw image at the projected pixel.
pub fn frame_photometric_error(
    map: &VoxelMap,
    state: &FullState,
    raw: &RawImage,
    model: &PhotometricModel,
    cfg: &PipelineConfig,
) -> Option<f64> {
    let zero = Vector2::zeros();
    let tau = 1.0 / state.inv_exposure;
    let mut sum = 0.0;
    let mut count = 0usize;
    for pt in map.points() {
        if !pt.rad_initialized {
            continue;
        }
        let Some((pix, _)) = project(state, &pt.pos, &zero, &zero, 0.1, cfg.min_depth) else {
            continue;
        };
        // Bilinear observation at the exact projection; reject any support
        // pixel in the saturation guard band, like the estimator does.
        let Some(observed) = sample_raw_bilinear(raw, &pix) else {
            continue;
        };
        let xi = (pix.x.round() as usize).min(raw.width - 1);
        let yi = (pix.y.round() as usize).min(raw.height - 1);
        let v = model.vignette.at(xi, yi);
        let (predicted, sat) = render_pixel(&pt.radiance, tau, v, model);
        if sat {
            continue;
        }
        for c in 0..3 {
            sum += (predicted[c] - observed[c]).abs();
            count += 1;
        }
    }
    if count < 100 {
        None
    } else {
        Some(sum / count as f64)
    }
}

fn sample_raw_bilinear(raw: &RawImage, pix: &Vector2<f64>) -> Option<[f64; 3]> {
    let (x, y) = (pix.x, pix.y);
    if !(x >= 0.0 && y >= 0.0 && x <= (raw.width - 1) as f64 && y <= (raw.height - 1) as f64) {
        return None;
    }
    let x0 = (x as usize).min(raw.width - 2);
    let y0 = (y as usize).min(raw.height - 2);
    let wx = x - x0 as f64;
    let wy = y - y0 as f64;
    let mut out = [0.0; 3];
    for (px, py, w) in [
        (x0, y0, (1.0 - wx) * (1.0 - wy)),
        (x0 + 1, y0, wx * (1.0 - wy)),
        (x0, y0 + 1, (1.0 - wx) * wy),
        (x0 + 1, y0 + 1, wx * wy),
    ] {
        let c = raw.at(px.min(raw.width - 1), py.min(raw.height - 1));
        if w > 0.0
            && c.iter().any(|&v| {
                v <= livo_core::photometric::SATURATION_LOW
                    || v >= livo_core::photometric::SATURATION_HIGH
            })
        {
            return None;
        }
        for ch in 0..3 {
            out[ch] += w * c[ch];
        }
    }
    Some(out)
}
