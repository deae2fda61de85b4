//! Pyramidal Lucas-Kanade point tracker on the luminance of corrected
//! images. Translation-only warp, template gradients, coarse-to-fine.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use nalgebra::ComplexField;
use nalgebra::{Matrix2, Vector2};

use crate::config::PipelineConfig;
use crate::photometric::CorrectedImage;

/// Single-channel float image (f32 storage: tracker math happens in f64
/// on sampled values, storage precision is far below photometric noise).
#[derive(Clone, Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x] as f64
    }

    /// Bilinear sample; `None` outside the image.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = (x as usize).min(self.width - 2);
        let y0 = (y as usize).min(self.height - 2);
        let wx = x - x0 as f64;
        let wy = y - y0 as f64;
        Some(
            self.at(x0, y0) * (1.0 - wx) * (1.0 - wy)
                + self.at(x0 + 1, y0) * wx * (1.0 - wy)
                + self.at(x0, y0 + 1) * (1.0 - wx) * wy
                + self.at(x0 + 1, y0 + 1) * wx * wy,
        )
    }
}

/// Luminance pyramid; level 0 is full resolution, each level above is a
/// 2x2 box downsample.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn build(img: &CorrectedImage, levels: usize) -> Self {
        let mut out = Vec::with_capacity(levels);
        let mut base = GrayImage {
            width: img.width,
            height: img.height,
            data: img.luminance_plane().to_vec(),
        };
        for _ in 0..levels {
            let next_w = base.width / 2;
            let next_h = base.height / 2;
            let mut next = GrayImage {
                width: next_w,
                height: next_h,
                data: vec![0.0f32; next_w * next_h],
            };
            for y in 0..next_h {
                for x in 0..next_w {
                    next.data[y * next_w + x] = (0.25
                        * (base.at(2 * x, 2 * y)
                            + base.at(2 * x + 1, 2 * y)
                            + base.at(2 * x, 2 * y + 1)
                            + base.at(2 * x + 1, 2 * y + 1)))
                        as f32;
                }
            }
            out.push(base);
            base = next;
        }
        out.push(base);
        out.truncate(levels.max(1));
        Self { levels: out }
    }
}

/// Per-pixel minimum eigenvalue of the gradient normal matrix of the
/// window at `center`; `None` when the window leaves the image. The same
/// texture gate the tracker applies, usable to pre-screen candidates.
pub fn texture_score(img: &GrayImage, center: &Vector2<f64>, half_win: usize) -> Option<f64> {
    let hw = half_win as isize;
    let win = (2 * hw + 1) as usize;
    let pad = (win + 2) as isize;
    let mut tmpl = vec![0.0; (pad * pad) as usize];
    for j in 0..pad {
        for i in 0..pad {
            tmpl[(j * pad + i) as usize] =
                img.bilinear(center.x + (i - hw - 1) as f64, center.y + (j - hw - 1) as f64)?;
        }
    }
    let mut normal = Matrix2::<f64>::zeros();
    for j in 0..win {
        for i in 0..win {
            let c = ((j + 1) as isize * pad + (i + 1) as isize) as usize;
            let dx = 0.5 * (tmpl[c + 1] - tmpl[c - 1]);
            let dy = 0.5 * (tmpl[c + pad as usize] - tmpl[c - pad as usize]);
            normal[(0, 0)] += dx * dx;
            normal[(0, 1)] += dx * dy;
            normal[(1, 1)] += dy * dy;
        }
    }
    normal[(1, 0)] = normal[(0, 1)];
    Some(normal.symmetric_eigenvalues().min() / (win * win) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Ok,
    Lost,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackResult {
    pub pos: Vector2<f64>,
    pub status: TrackStatus,
    /// Pixel covariance of the track from the normal-matrix inverse scaled
    /// by the residual variance.
    pub cov: Matrix2<f64>,
}

fn lost() -> TrackResult {
    TrackResult {
        pos: Vector2::zeros(),
        status: TrackStatus::Lost,
        cov: Matrix2::identity(),
    }
}

/// Track `pts` from `prev` into `cur`. Lost points keep their slot with
/// `TrackStatus::Lost`.
pub fn track_lk(
    prev: &Pyramid,
    cur: &Pyramid,
    pts: &[Vector2<f64>],
    cfg: &PipelineConfig,
) -> Vec<TrackResult> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        return pts.par_iter().map(|p| track_point(prev, cur, p, cfg)).collect();
    }
    #[cfg(not(feature = "parallel"))]
    pts.iter().map(|p| track_point(prev, cur, p, cfg)).collect()
}

fn track_point(
    prev: &Pyramid,
    cur: &Pyramid,
    pt: &Vector2<f64>,
    cfg: &PipelineConfig,
) -> TrackResult {
    let hw = cfg.lk_half_win as isize;
    let win = (2 * hw + 1) as usize;
    let n_px = (win * win) as f64;
    let mut flow = Vector2::zeros();
    let mut normal0 = Matrix2::zeros();
    let mut mse = 0.0;

    let top = prev.levels.len() - 1;
    for level in (0..=top).rev() {
        let scale = (1 << level) as f64;
        let u = pt / scale;
        let tmpl_img = &prev.levels[level];
        let cur_img = &cur.levels[level];

        // Template (padded one pixel for gradients).
        let pad = (win + 2) as isize;
        let mut tmpl = vec![0.0; (pad * pad) as usize];
        let mut ok = true;
        for j in 0..pad {
            for i in 0..pad {
                match tmpl_img.bilinear(
                    u.x + (i - hw - 1) as f64,
                    u.y + (j - hw - 1) as f64,
                ) {
                    Some(v) => tmpl[(j * pad + i) as usize] = v,
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
        }
        if !ok {
            return lost();
        }

        let mut gx = vec![0.0; win * win];
        let mut gy = vec![0.0; win * win];
        let mut normal = Matrix2::zeros();
        for j in 0..win {
            for i in 0..win {
                let c = ((j + 1) as isize * pad + (i + 1) as isize) as usize;
                let dx = 0.5 * (tmpl[c + 1] - tmpl[c - 1]);
                let dy = 0.5 * (tmpl[c + pad as usize] - tmpl[c - pad as usize]);
                gx[j * win + i] = dx;
                gy[j * win + i] = dy;
                normal[(0, 0)] += dx * dx;
                normal[(0, 1)] += dx * dy;
                normal[(1, 1)] += dy * dy;
            }
        }
        normal[(1, 0)] = normal[(0, 1)];

        // Textureless patch: rank-deficient normal matrix.
        let eig = normal.symmetric_eigenvalues();
        if eig.min() / n_px < cfg.lk_min_eig {
            return lost();
        }
        let Some(normal_inv) = normal.try_inverse() else {
            return lost();
        };

        let mut delta_total = Vector2::zeros();
        for _ in 0..cfg.lk_iterations {
            let target = u + flow + delta_total;
            let mut b = Vector2::zeros();
            let mut sq = 0.0;
            for j in 0..win {
                for i in 0..win {
                    let off_x = (i as isize - hw) as f64;
                    let off_y = (j as isize - hw) as f64;
                    let Some(cv) = cur_img.bilinear(target.x + off_x, target.y + off_y) else {
                                    return lost();
                    };
                    let t =
                        tmpl[((j + 1) as isize * pad + (i + 1) as isize) as usize];
                    let e = cv - t;
                    b.x += e * gx[j * win + i];
                    b.y += e * gy[j * win + i];
                    sq += e * e;
                }
            }
            mse = sq / n_px;
            let step = normal_inv * b;
            delta_total -= step;
            if step.norm() < 0.01 {
                break;
            }
            if !step.x.is_finite() || delta_total.norm() > 40.0 {
                    return lost();
            }
        }
        flow += delta_total;
        if level > 0 {
            flow *= 2.0;
        } else {
            normal0 = normal;
        }
    }

    if mse.sqrt() > cfg.lk_max_residual {
            return lost();
    }
    let pos = pt + flow;
    let sigma2 = mse.max(1e-8);
    let cov = normal0
        .try_inverse()
        .unwrap_or_else(Matrix2::identity)
        * (sigma2 * n_px)
        + Matrix2::identity() * 1e-6;
    TrackResult { pos, status: TrackStatus::Ok, cov }
}
