//! Novel-view rendering from the radiance map at arbitrary exposure times,
//! and saturation-weighted merging of an exposure stack into a high dynamic
//! range radiance image.

use std::path::Path;

use livo_core::manifold::Rotation;
use livo_core::map::VoxelMap;
use livo_core::photometric::{
    render_pixel, PhotometricModel, RawImage, SATURATION_HIGH, SATURATION_LOW,
};
use nalgebra::{Vector3, Vector4};

use crate::{PipelineError, Result};

/// Float radiance image with a per-pixel coverage flag.
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
    pub covered: Vec<bool>,
}

/// Splat every radiance-initialized map point into the image plane with a
/// z-buffer and render it through the photometric model at exposure `tau`.
/// Over-exposed points are omitted. Returns the image and the per-pixel
/// depth buffer (infinity where empty).
#[allow(clippy::too_many_arguments)]
pub fn render_ldr(
    map: &VoxelMap,
    rot_wc: &Rotation,
    pos_wc: &Vector3<f64>,
    intrinsics: &Vector4<f64>,
    width: usize,
    height: usize,
    model: &PhotometricModel,
    tau: f64,
) -> (RawImage, Vec<f64>) {
    let mut img = RawImage::zeros(width, height);
    let mut depth = vec![f64::INFINITY; width * height];
    let rot_cw = rot_wc.transpose();
    let (fx, fy, cx, cy) = (intrinsics[0], intrinsics[1], intrinsics[2], intrinsics[3]);
    for pt in map.points() {
        if !pt.rad_initialized {
            continue;
        }
        let c = rot_cw * (pt.pos - pos_wc);
        if c.z <= 0.05 {
            continue;
        }
        let px = (fx * c.x / c.z + cx).round();
        let py = (fy * c.y / c.z + cy).round();
        if px < 0.0 || py < 0.0 || px as usize >= width || py as usize >= height {
            continue;
        }
        let (xi, yi) = (px as usize, py as usize);
        let idx = yi * width + xi;
        if c.z >= depth[idx] {
            continue;
        }
        let v = model.vignette.at(xi, yi);
        // Over-exposed points are not displayed.
        if (0..3).any(|ch| tau * v * pt.radiance[ch] >= 1.0) {
            continue;
        }
        let (rendered, _) = render_pixel(&pt.radiance, tau, v, model);
        depth[idx] = c.z;
        *img.at_mut(xi, yi) = [rendered[0], rendered[1], rendered[2]];
    }
    (img, depth)
}

/// Render the exposure stack and merge it: per pixel and channel, recovered
/// radiance values are averaged with hat weights that vanish at the
/// saturation bounds.
#[allow(clippy::too_many_arguments)]
pub fn render_hdr(
    map: &VoxelMap,
    rot_wc: &Rotation,
    pos_wc: &Vector3<f64>,
    intrinsics: &Vector4<f64>,
    width: usize,
    height: usize,
    model: &PhotometricModel,
    exposures: &[f64],
) -> (Vec<RawImage>, HdrImage) {
    let mut ldrs = Vec::with_capacity(exposures.len());
    let mut covers = Vec::with_capacity(exposures.len());
    for &tau in exposures {
        let (img, depth) = render_ldr(map, rot_wc, pos_wc, intrinsics, width, height, model, tau);
        covers.push(depth);
        ldrs.push(img);
    }
    let mut data = vec![[0.0; 3]; width * height];
    let mut covered = vec![false; width * height];
    for idx in 0..width * height {
        let (x, y) = (idx % width, idx / width);
        let v = model.vignette.at(x, y);
        for ch in 0..3 {
            let mut acc = 0.0;
            let mut weight_sum = 0.0;
            for (k, &tau) in exposures.iter().enumerate() {
                if covers[k][idx].is_infinite() {
                    continue;
                }
                let intensity = ldrs[k].at(x, y)[ch];
                let w = (intensity - SATURATION_LOW)
                    .min(SATURATION_HIGH - intensity)
                    .max(0.0);
                if w <= 0.0 {
                    continue;
                }
                let radiance = model.crf[ch].eval_inv(intensity) / (tau * v);
                acc += w * radiance;
                weight_sum += w;
            }
            if weight_sum > 0.0 {
                data[idx][ch] = acc / weight_sum;
                covered[idx] = true;
            }
        }
    }
    (ldrs, HdrImage { width, height, data, covered })
}

/// Portable float map (PF, binary, bottom-up rows) for HDR output.
pub fn write_pfm(path: &Path, img: &HdrImage) -> Result<()> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..3 {
                out.extend_from_slice(&(img.data[y * img.width + x][c] as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| PipelineError::io(path.display().to_string(), e))
}

pub fn write_ppm(path: &Path, img: &RawImage) -> Result<()> {
    let rgb8 = crate::scenario::raw_to_rgb8(img);
    std::fs::write(path, crate::log::encode_ppm(img.width, img.height, &rgb8))
        .map_err(|e| PipelineError::io(path.display().to_string(), e))
}
