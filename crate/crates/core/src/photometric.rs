//! Color-camera photometric model: per-channel camera response functions,
//! a vignetting raster and the exposure model, plus image correction and
//! the forward pixel model used by both the estimator and the simulator.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg(not(feature = "std"))]
use nalgebra::ComplexField;
use nalgebra::{Vector2, Vector3};

use crate::rng::SeededRng;

/// Normalized intensities at or below this count as under-exposed, at or
/// above `SATURATION_HIGH` as over-exposed.
pub const SATURATION_LOW: f64 = 2.0 / 255.0;
pub const SATURATION_HIGH: f64 = 253.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhotometricError {
    /// Image dimensions disagree with the vignette raster.
    DimensionMismatch,
    /// Curve knots are not strictly increasing from 0 to 1.
    InvalidCurve,
}

impl fmt::Display for PhotometricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhotometricError::DimensionMismatch => write!(f, "image/vignette dimension mismatch"),
            PhotometricError::InvalidCurve => {
                write!(f, "response curve must rise strictly from 0 to 1")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PhotometricError {}

/// Monotone camera response function stored as 256 knots over [0, 1] with
/// linear interpolation. The inverse is evaluated exactly on the same
/// piecewise-linear curve, so f(f^-1(y)) = y to round-off.
#[derive(Clone, Debug)]
pub struct ResponseCurve {
    knots: Vec<f64>,
    /// Segment index hints for inverse lookups: for each bucket of the
    /// output range, the segment containing the bucket start.
    inv_hint: Vec<u16>,
    /// dx/dy per segment, so inverse evaluation needs no division.
    inv_slopes: Vec<f64>,
}

const INV_HINT_BUCKETS: usize = 1024;

impl ResponseCurve {
    pub const KNOTS: usize = 256;

    pub fn from_knots(knots: Vec<f64>) -> Result<Self, PhotometricError> {
        if knots.len() != Self::KNOTS
            || knots[0] != 0.0
            || (knots[Self::KNOTS - 1] - 1.0).abs() > 1e-12
            || knots.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(PhotometricError::InvalidCurve);
        }
        let mut inv_hint = vec![0u16; INV_HINT_BUCKETS];
        let mut seg = 0usize;
        for (b, hint) in inv_hint.iter_mut().enumerate() {
            let y = b as f64 / INV_HINT_BUCKETS as f64;
            while seg + 2 < Self::KNOTS && knots[seg + 1] <= y {
                seg += 1;
            }
            *hint = seg as u16;
        }
        let scale = 1.0 / (Self::KNOTS - 1) as f64;
        let inv_slopes = knots
            .windows(2)
            .map(|w| scale / (w[1] - w[0]))
            .collect();
        Ok(Self { knots, inv_hint, inv_slopes })
    }

    /// Segment index such that knots[i] <= y <= knots[i + 1].
    #[inline]
    fn inv_segment(&self, y: f64) -> usize {
        let bucket = ((y * INV_HINT_BUCKETS as f64) as usize).min(INV_HINT_BUCKETS - 1);
        let mut seg = self.inv_hint[bucket] as usize;
        while seg + 2 < Self::KNOTS && self.knots[seg + 1] < y {
            seg += 1;
        }
        seg
    }

    /// Sample an arbitrary monotone map on the knot grid.
    pub fn from_fn(f: impl Fn(f64) -> f64) -> Result<Self, PhotometricError> {
        let knots = (0..Self::KNOTS)
            .map(|i| f(i as f64 / (Self::KNOTS - 1) as f64))
            .collect();
        Self::from_knots(knots)
    }

    pub fn identity() -> Self {
        Self::from_fn(|x| x).unwrap()
    }

    pub fn gamma(g: f64) -> Self {
        Self::from_fn(|x| x.powf(g)).unwrap()
    }

    /// Random strictly increasing curve with slope bounded away from zero.
    pub fn random_monotone(rng: &mut SeededRng) -> Self {
        let mut acc = vec![0.0; Self::KNOTS];
        for i in 1..Self::KNOTS {
            acc[i] = acc[i - 1] + 0.2 + rng.uniform();
        }
        let total = acc[Self::KNOTS - 1];
        for v in acc.iter_mut() {
            *v /= total;
        }
        acc[Self::KNOTS - 1] = 1.0;
        Self::from_knots(acc).unwrap()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Forward evaluation with the input clamped to [0, 1].
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        let scaled = x * (Self::KNOTS - 1) as f64;
        let idx = (scaled as usize).min(Self::KNOTS - 2);
        let frac = scaled - idx as f64;
        self.knots[idx] + (self.knots[idx + 1] - self.knots[idx]) * frac
    }

    /// Exact inverse of the piecewise-linear forward curve.
    pub fn eval_inv(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        let idx = self.inv_segment(y);
        let scale = 1.0 / (Self::KNOTS - 1) as f64;
        idx as f64 * scale + (y - self.knots[idx]) * self.inv_slopes[idx]
    }

    /// Slope of the inverse at `y`; feeds the intensity-noise model.
    pub fn inv_slope(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        self.inv_slopes[self.inv_segment(y)]
    }
}

/// Per-pixel lens attenuation in (0, 1].
#[derive(Clone, Debug)]
pub struct VignetteMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
    inv: Vec<f64>,
}

impl VignetteMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PhotometricError> {
        if data.len() != width * height {
            return Err(PhotometricError::DimensionMismatch);
        }
        let inv = data.iter().map(|v| 1.0 / v).collect();
        Ok(Self { width, height, data, inv })
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![1.0; width * height]).unwrap()
    }

    /// Smooth radial falloff, `strength` in [0, 1): V = 1 - strength * (r/r_max)^2.
    pub fn radial(width: usize, height: usize, strength: f64) -> Self {
        let cx = (width as f64 - 1.0) * 0.5;
        let cy = (height as f64 - 1.0) * 0.5;
        let r2max = cx * cx + cy * cy;
        let data = (0..width * height)
            .map(|i| {
                let x = (i % width) as f64 - cx;
                let y = (i / width) as f64 - cy;
                1.0 - strength * (x * x + y * y) / r2max
            })
            .collect();
        Self::new(width, height, data).unwrap()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn inv_data(&self) -> &[f64] {
        &self.inv
    }
}

/// Calibrated camera photometry: three response curves plus one shared
/// vignette raster. Immutable after load.
#[derive(Clone, Debug)]
pub struct PhotometricModel {
    pub crf: [ResponseCurve; 3],
    pub vignette: VignetteMap,
}

impl PhotometricModel {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crf: [
                ResponseCurve::identity(),
                ResponseCurve::identity(),
                ResponseCurve::identity(),
            ],
            vignette: VignetteMap::uniform(width, height),
        }
    }
}

/// Camera output: 3-channel intensities normalized to [0, 1].
#[derive(Clone, Debug)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    data: Vec<[f64; 3]>,
    /// Original 8-bit samples when the image came from a camera-style
    /// source; correction takes a table-lookup fast path through these.
    rgb8: Option<Vec<u8>>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data, rgb8: None }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height], rgb8: None }
    }

    /// Exact normalization of 8-bit camera data.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        let data = bytes
            .chunks_exact(3)
            .map(|c| {
                [
                    c[0] as f64 / 255.0,
                    c[1] as f64 / 255.0,
                    c[2] as f64 / 255.0,
                ]
            })
            .collect();
        Self { width, height, data, rgb8: Some(bytes.to_vec()) }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f64; 3] {
        &mut self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }
}

/// Photometrically corrected image: per-pixel irradiance-per-exposure
/// values (response and vignetting removed), with a saturation mask.
/// Masked pixels are excluded from every residual.
#[derive(Clone, Debug)]
pub struct CorrectedImage {
    pub width: usize,
    pub height: usize,
    pub t_capture: f64,
    /// rgb plus the saturation flag in the fourth lane, packed as f32 so a
    /// bilinear sample touches one 16-byte record per pixel. Values are
    /// exposure-normalized irradiances around [0, 2]; single precision
    /// keeps them to ~1e-7 relative, far below the image noise floor.
    data: Vec<[f32; 4]>,
    /// Channel mean, kept as its own plane for the tracker pyramid.
    lum: Vec<f32>,
}

impl CorrectedImage {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        let v = self.data[y * self.width + x];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    }

    #[inline]
    fn record(&self, x: usize, y: usize) -> &[f32; 4] {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_saturated(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x][3] != 0.0
    }

    /// Mean of the three channels; the tracker runs on this.
    #[inline]
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        self.lum[y * self.width + x] as f64
    }

    pub fn luminance_plane(&self) -> &[f32] {
        &self.lum
    }
}

/// Undo response and vignetting: per channel f_i^-1(I_i) / V. Pixels inside
/// the saturation guard band on any channel are masked.
pub fn correct_image(
    raw: &RawImage,
    model: &PhotometricModel,
    t_capture: f64,
) -> Result<CorrectedImage, PhotometricError> {
    if raw.width != model.vignette.width || raw.height != model.vignette.height {
        return Err(PhotometricError::DimensionMismatch);
    }
    let n = raw.data.len();
    let mut data = vec![[0.0f32; 4]; n];
    let mut lum = vec![0.0f32; n];
    // 8-bit sources have only 256 possible values per channel; precompute
    // the inverse response for each (identical results, no per-pixel
    // curve walk).
    let tables: Option<[Vec<f64>; 3]> = raw.rgb8.as_ref().map(|_| {
        let mk = |c: usize| {
            (0..256)
                .map(|b| model.crf[c].eval_inv(b as f64 / 255.0))
                .collect::<Vec<f64>>()
        };
        [mk(0), mk(1), mk(2)]
    });
    let span = |start: usize, drow: &mut [[f32; 4]], lrow: &mut [f32]| {
        let inv_vig = &model.vignette.inv_data()[start..start + drow.len()];
        if let (Some(tables), Some(rgb8)) = (&tables, &raw.rgb8) {
            let bytes = &rgb8[start * 3..(start + drow.len()) * 3];
            for (((b, iv), out), l) in bytes
                .chunks_exact(3)
                .zip(inv_vig)
                .zip(drow.iter_mut())
                .zip(lrow.iter_mut())
            {
                let mut sat = false;
                for i in 0..3 {
                    sat |= b[i] <= 2 || b[i] >= 253;
                    out[i] = (tables[i][b[i] as usize] * iv) as f32;
                }
                out[3] = if sat { 1.0 } else { 0.0 };
                *l = (out[0] + out[1] + out[2]) * (1.0 / 3.0);
            }
            return;
        }
        let raw_px = &raw.data[start..start + drow.len()];
        for (((px, iv), out), l) in
            raw_px.iter().zip(inv_vig).zip(drow.iter_mut()).zip(lrow.iter_mut())
        {
            let mut sat = false;
            for i in 0..3 {
                sat |= px[i] <= SATURATION_LOW || px[i] >= SATURATION_HIGH;
                out[i] = (model.crf[i].eval_inv(px[i]) * iv) as f32;
            }
            out[3] = if sat { 1.0 } else { 0.0 };
            *l = (out[0] + out[1] + out[2]) * (1.0 / 3.0);
        }
    };
    // Chunks of several rows keep the parallel dispatch overhead small.
    let chunk = raw.width * 16;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .zip(lum.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(i, (drow, lrow))| span(i * chunk, drow, lrow));
    }
    #[cfg(not(feature = "parallel"))]
    for (i, (drow, lrow)) in data.chunks_mut(chunk).zip(lum.chunks_mut(chunk)).enumerate() {
        span(i * chunk, drow, lrow);
    }
    Ok(CorrectedImage { width: raw.width, height: raw.height, t_capture, data, lum })
}

/// Forward pixel model: I_i = f_i(clamp(tau * v * radiance_i)). The flag
/// reports accumulated irradiance at the clamp boundary (under- or
/// over-exposed).
pub fn render_pixel(
    radiance: &Vector3<f64>,
    tau: f64,
    v: f64,
    model: &PhotometricModel,
) -> (Vector3<f64>, bool) {
    let mut out = Vector3::zeros();
    let mut saturated = false;
    for i in 0..3 {
        let theta = tau * v * radiance[i];
        saturated |= theta <= 0.0 || theta >= 1.0;
        out[i] = model.crf[i].eval(theta.clamp(0.0, 1.0));
    }
    (out, saturated)
}

/// Invert the pixel model at integer pixel `(x, y)`: f_i^-1(I_i) / (tau V).
/// Refuses saturated inputs so callers skip the pixel.
pub fn recover_radiance(
    intensity: &Vector3<f64>,
    pixel: (usize, usize),
    tau: f64,
    model: &PhotometricModel,
) -> Option<Vector3<f64>> {
    for i in 0..3 {
        if intensity[i] <= SATURATION_LOW || intensity[i] >= SATURATION_HIGH {
            return None;
        }
    }
    let v = model.vignette.at(pixel.0, pixel.1);
    let mut out = Vector3::zeros();
    for i in 0..3 {
        out[i] = model.crf[i].eval_inv(intensity[i]) / (tau * v);
    }
    Some(out)
}

/// Bilinear sample of a corrected image. Invalid when the point leaves the
/// image or any pixel with nonzero interpolation weight is saturated.
pub fn sample_bilinear(img: &CorrectedImage, rho: &Vector2<f64>) -> Option<Vector3<f64>> {
    let (x, y) = (rho.x, rho.y);
    if !(x >= 0.0 && y >= 0.0 && x <= (img.width - 1) as f64 && y <= (img.height - 1) as f64) {
        return None;
    }
    let x0 = (x as usize).min(img.width - 1);
    let y0 = (y as usize).min(img.height - 1);
    let wx = x - x0 as f64;
    let wy = y - y0 as f64;
    let mut acc = Vector3::zeros();
    for (px, py, w) in [
        (x0, y0, (1.0 - wx) * (1.0 - wy)),
        (x0 + 1, y0, wx * (1.0 - wy)),
        (x0, y0 + 1, (1.0 - wx) * wy),
        (x0 + 1, y0 + 1, wx * wy),
    ] {
        if w == 0.0 {
            continue;
        }
        if px >= img.width || py >= img.height {
            return None;
        }
        let v = img.record(px, py);
        if v[3] != 0.0 {
            return None;
        }
        acc += Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64) * w;
    }
    Some(acc)
}

/// Bilinear sample plus the exact in-cell spatial gradient (per channel,
/// d/dx and d/dy). Requires the full 2x2 support to be in bounds and
/// unsaturated, which is what the radiance residual needs anyway.
pub fn sample_bilinear_with_gradient(
    img: &CorrectedImage,
    rho: &Vector2<f64>,
) -> Option<(Vector3<f64>, [Vector3<f64>; 2])> {
    let (x, y) = (rho.x, rho.y);
    if !(x >= 0.0 && y >= 0.0 && x <= (img.width - 1) as f64 && y <= (img.height - 1) as f64) {
        return None;
    }
    let x0 = (x as usize).min(img.width.saturating_sub(2));
    let y0 = (y as usize).min(img.height.saturating_sub(2));
    if x0 + 1 >= img.width || y0 + 1 >= img.height {
        return None;
    }
    let r00 = img.record(x0, y0);
    let r10 = img.record(x0 + 1, y0);
    let r01 = img.record(x0, y0 + 1);
    let r11 = img.record(x0 + 1, y0 + 1);
    if r00[3] + r10[3] + r01[3] + r11[3] != 0.0 {
        return None;
    }
    let wx = x - x0 as f64;
    let wy = y - y0 as f64;
    let to_v = |r: &[f32; 4]| Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64);
    let p00 = to_v(r00);
    let p10 = to_v(r10);
    let p01 = to_v(r01);
    let p11 = to_v(r11);
    let value = p00 * ((1.0 - wx) * (1.0 - wy))
        + p10 * (wx * (1.0 - wy))
        + p01 * ((1.0 - wx) * wy)
        + p11 * (wx * wy);
    let ddx = (p10 - p00) * (1.0 - wy) + (p11 - p01) * wy;
    let ddy = (p01 - p00) * (1.0 - wx) + (p11 - p10) * wx;
    Some((value, [ddx, ddy]))
}
