//! The measurement-ordered fusion loop: every LiDAR scan runs
//! propagate -> de-skew -> point-to-plane update -> map append; every camera
//! frame runs propagate -> photometric correction -> tracking ->
//! frame-to-frame update -> frame-to-map update -> Bayesian radiance
//! recovery -> tracked-point maintenance. Strictly sequential per event, so
//! identical inputs and seeds reproduce identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use livo_core::imu::{backward_compensate, init_gravity, propagate};
use livo_core::lio::lio_update;
use livo_core::manifold::{blocks, StateCovariance};
use livo_core::map::VoxelMap;
use livo_core::photometric::correct_image;
use livo_core::vio::{
    bayes_update_radiance, f2f_update, f2m_update, observe_radiance, track_lk,
    update_tracked_points, CameraFrame, CandidateProjection, FrustumCull, Pyramid, TrackStatus,
    TrackedPoint,
};
use livo_core::{FullState, PipelineConfig};

use crate::eval::TrajPoint;
use crate::{EventDesc, PipelineError, Result, SequenceSource};

/// Mean/std accumulator for stage timings.
#[derive(Clone, Copy, Debug, Default)]
pub struct StatAcc {
    pub n: usize,
    sum: f64,
    sum2: f64,
    pub max: f64,
}

impl StatAcc {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum2 += v * v;
        self.max = self.max.max(v);
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    pub fn std(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.sum2 / self.n as f64 - m * m).max(0.0).sqrt()
    }

    pub fn total(&self) -> f64 {
        self.sum
    }
}

/// Per-stage and per-event timing plus event counters.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub stages: BTreeMap<&'static str, StatAcc>,
    pub scan_ms: StatAcc,
    pub frame_ms: StatAcc,
    pub scans: usize,
    pub frames: usize,
    pub degenerate_scans: usize,
    pub skipped_f2f: usize,
    pub skipped_f2m: usize,
    pub map_points: usize,
    pub stream_duration: f64,
    pub objective_violations: usize,
}

impl RunReport {
    fn stage(&mut self, name: &'static str, ms: f64) {
        self.stages.entry(name).or_default().push(ms);
    }

    /// Sum of all measured processing time (ms).
    pub fn processing_ms(&self) -> f64 {
        self.scan_ms.total() + self.frame_ms.total()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "events: {} scans, {} frames", self.scans, self.frames);
        let _ = writeln!(
            out,
            "per-scan:  mean {:8.3} ms  std {:7.3} ms  max {:8.3} ms",
            self.scan_ms.mean(),
            self.scan_ms.std(),
            self.scan_ms.max
        );
        let _ = writeln!(
            out,
            "per-frame: mean {:8.3} ms  std {:7.3} ms  max {:8.3} ms",
            self.frame_ms.mean(),
            self.frame_ms.std(),
            self.frame_ms.max
        );
        for (name, acc) in &self.stages {
            let _ = writeln!(
                out,
                "  {name:<18} n {:5}  mean {:8.3} ms  std {:7.3} ms",
                acc.n,
                acc.mean(),
                acc.std()
            );
        }
        let _ = writeln!(
            out,
            "processing {:.1} ms over a {:.1} s stream ({:.2}x real time)",
            self.processing_ms(),
            self.stream_duration,
            self.stream_duration * 1000.0 / self.processing_ms().max(1e-9)
        );
        let _ = writeln!(
            out,
            "degenerate scans: {}, skipped f2f: {}, skipped f2m: {}, map points: {}",
            self.degenerate_scans, self.skipped_f2f, self.skipped_f2m, self.map_points
        );
        let _ = writeln!(out, "objective violations: {}", self.objective_violations);
        out
    }
}

/// Estimated state at one camera frame (for photometric evaluation).
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub t: f64,
    pub image_index: usize,
    pub state: FullState,
}

pub struct RunResult {
    pub trajectory: Vec<TrajPoint>,
    pub frames: Vec<FrameRecord>,
    pub map: VoxelMap,
    pub report: RunReport,
    pub final_state: FullState,
}

fn initial_covariance(cfg: &PipelineConfig) -> StateCovariance {
    use blocks::*;
    let mut p = StateCovariance::zeros();
    let set = |p: &mut StateCovariance, off: usize, len: usize, var: f64| {
        for i in 0..len {
            p[(off + i, off + i)] = var;
        }
    };
    set(&mut p, ROT, 3, 1e-6);
    set(&mut p, POS, 3, 1e-8); // the origin is defined here
    set(&mut p, VEL, 3, 1e-4);
    set(&mut p, BIAS_GYRO, 3, 1e-4);
    set(&mut p, BIAS_ACC, 3, 1e-2);
    set(&mut p, GRAVITY, 2, 1e-4);
    set(&mut p, ROT_EXT, 3, 1e-8);
    set(&mut p, POS_EXT, 3, 1e-8);
    // Exposure is pinned at init: the first frames define the radiance
    // scale; the random walk opens it up afterwards.
    let eps_sigma = 1e-3 * cfg.inv_exposure_init;
    p[(INV_EXPOSURE, INV_EXPOSURE)] = eps_sigma * eps_sigma;
    p[(TIME_OFFSET, TIME_OFFSET)] = 1e-10;
    set(&mut p, INTRINSICS, 4, 1e-8);
    p
}

/// Run the full pipeline over a sequence. Events must be time-sorted; a
/// non-monotonic stream or missing calibration is fatal.
pub fn run_pipeline(source: &mut dyn SequenceSource, cfg: &PipelineConfig) -> Result<RunResult> {
    run_pipeline_with_map(source, cfg, None)
}

/// Like [`run_pipeline`] but starting from a pre-built map (evaluation
/// aid, e.g. registering against known geometry).
pub fn run_pipeline_with_map(
    source: &mut dyn SequenceSource,
    cfg: &PipelineConfig,
    initial_map: Option<VoxelMap>,
) -> Result<RunResult> {
    let meta = source.meta().clone();
    let model = source.model().clone();
    let imu: Vec<_> = source.imu().to_vec();
    if imu.len() < 2 {
        return Err(PipelineError::Sequence("imu stream empty".into()));
    }
    let events = source.events();
    for w in events.windows(2) {
        if w[1].t() < w[0].t() {
            return Err(PipelineError::Sequence(format!(
                "events not time-sorted at t={}",
                w[1].t()
            )));
        }
    }

    let mut x = FullState::default();
    x.gravity = init_gravity(&imu, cfg.gravity_init_window);
    x.rot_ext = meta.cam_rot_ext;
    x.pos_ext = meta.cam_pos_ext;
    x.intrinsics = meta.intrinsics;
    x.inv_exposure = cfg.inv_exposure_init;
    let mut cov = initial_covariance(cfg);
    let mut t_state = imu.first().map(|s| s.t).unwrap_or(0.0);

    let mut map = initial_map
        .unwrap_or_else(|| VoxelMap::new(cfg.voxel_size, cfg.map_resolution, cfg.activation_window));
    let mut tracked: Vec<TrackedPoint> = Vec::new();
    let mut prev_pyramid: Option<Pyramid> = None;
    let mut prev_frame_t = None::<f64>;

    let mut trajectory = Vec::new();
    let mut frames = Vec::new();
    let mut report = RunReport::default();
    let mut last_fused = f64::NEG_INFINITY;

    for ev in events {
        // Monotone fusion: never fuse behind the last fused measurement.
        debug_assert!(ev.t() >= last_fused);
        last_fused = last_fused.max(ev.t());

        match ev {
            EventDesc::Scan { index, t } => {
                let scan = source.scan(index)?;
                let t_evt = scan.t_end.max(t);
                let ev_start = Instant::now();

                let t0 = Instant::now();
                let (xp, pp) = propagate(&x, &cov, &imu, t_state, t_evt, cfg)?;
                report.stage("propagate_scan", t0.elapsed().as_secs_f64() * 1e3);

                let t0 = Instant::now();
                let (scan, _rejected) = backward_compensate(&scan, &imu, &xp, cfg)?;
                report.stage("deskew", t0.elapsed().as_secs_f64() * 1e3);

                let t0 = Instant::now();
                let (xn, pn, stats) = lio_update(&xp, &pp, &scan, &mut map, cfg);
                report.stage("lio_update", t0.elapsed().as_secs_f64() * 1e3);

                x = xn;
                cov = pn;
                t_state = t_evt;
                report.scans += 1;
                if stats.degenerate {
                    report.degenerate_scans += 1;
                }
                for (b, a) in &stats.objective {
                    if *a > *b * (1.0 + 1e-9) + 1e-9 {
                        report.objective_violations += 1;
                    }
                }
                trajectory.push(TrajPoint::from_pose(t_evt, &x.rot_imu, &x.pos_imu));
                report.scan_ms.push(ev_start.elapsed().as_secs_f64() * 1e3);
            }
            EventDesc::Image { index, t } => {
                let (raw, t_img) = source.image(index)?;
                let t_evt = t_img.max(t);
                let ev_start = Instant::now();

                let t0 = Instant::now();
                let (xp, pp) = propagate(&x, &cov, &imu, t_state, t_evt, cfg)?;
                x = xp;
                cov = pp;
                t_state = t_evt;
                report.stage("propagate_frame", t0.elapsed().as_secs_f64() * 1e3);

                if cfg.enable_vio {
                    let t0 = Instant::now();
                    let corrected = correct_image(&raw, &model, t_evt)?;
                    report.stage("correct_image", t0.elapsed().as_secs_f64() * 1e3);

                    let t0 = Instant::now();
                    let pyramid = Pyramid::build(&corrected, cfg.lk_levels);
                    report.stage("pyramid", t0.elapsed().as_secs_f64() * 1e3);

                    let dt_prev = prev_frame_t.map(|p| t_evt - p).unwrap_or(1.0 / meta.cam_rate);
                    let frame =
                        CameraFrame { corrected, t: t_evt, dt_prev: dt_prev.max(1e-4) };

                    if let Some(prev) = &prev_pyramid {
                        if !tracked.is_empty() {
                            let t0 = Instant::now();
                            let pts: Vec<_> = tracked.iter().map(|tp| tp.rho_prev).collect();
                            let results = track_lk(prev, &pyramid, &pts, cfg);
                            let mut kept = Vec::with_capacity(tracked.len());
                            for (mut tp, res) in tracked.drain(..).zip(results) {
                                if res.status == TrackStatus::Ok {
                                    tp.rho_cur = res.pos;
                                    tp.track_cov = res.cov;
                                    kept.push(tp);
                                }
                            }
                            tracked = kept;
                            report.stage("track_lk", t0.elapsed().as_secs_f64() * 1e3);

                            let t0 = Instant::now();
                            let (xn, pn, stats) =
                                f2f_update(&x, &cov, &tracked, &map, &frame, cfg);
                            x = xn;
                            cov = pn;
                            if stats.skipped {
                                report.skipped_f2f += 1;
                            }
                            for (b, a) in &stats.objective {
                                if *a > *b * (1.0 + 1e-9) + 1e-9 {
                                    report.objective_violations += 1;
                                }
                            }
                            report.stage("f2f_update", t0.elapsed().as_secs_f64() * 1e3);

                            let t0 = Instant::now();
                            let (xn, pn, stats) =
                                f2m_update(&x, &cov, &tracked, &map, &frame, &model, cfg);
                            x = xn;
                            cov = pn;
                            if stats.skipped {
                                report.skipped_f2m += 1;
                            }
                            for (b, a) in &stats.objective {
                                if *a > *b * (1.0 + 1e-9) + 1e-9 {
                                    report.objective_violations += 1;
                                }
                            }
                            report.stage("f2m_update", t0.elapsed().as_secs_f64() * 1e3);
                        }
                    }

                    // Radiance recovery over the activated map points that
                    // can project into this frame; independent per point,
                    // so it runs in parallel. The culled candidate set is
                    // shared with tracked-point maintenance below.
                    let t0 = Instant::now();
                    let cull = FrustumCull::new(
                        &x,
                        frame.corrected.width,
                        frame.corrected.height,
                        2.0,
                        cfg.min_depth,
                    );
                    let ids = map
                        .activated_points_filtered(t_evt, |c, r| cull.sphere_may_project(&c, r));
                    let x_ref = &x;
                    let frame_ref = &frame;
                    let model_ref = &model;
                    let projections: Vec<CandidateProjection> =
                        map.for_each_point_mut(&ids, |_, pt| {
                            let obs =
                                observe_radiance(x_ref, &pt.pos, None, frame_ref, model_ref, cfg);
                            let mut cand = CandidateProjection::default();
                            if let Some(obs) = obs {
                                bayes_update_radiance(
                                    pt,
                                    &obs.phi,
                                    &obs.cov,
                                    t_evt,
                                    cfg.sigma_illumination,
                                );
                                cand.pixel = obs.pixel;
                                cand.visible = true;
                            }
                            cand.rad_initialized = pt.rad_initialized;
                            cand
                        });
                    report.stage("radiance_update", t0.elapsed().as_secs_f64() * 1e3);

                    let t0 = Instant::now();
                    update_tracked_points(
                        &mut tracked,
                        &map,
                        &frame,
                        &model,
                        Some(&pyramid),
                        &ids,
                        Some(&projections),
                        &x,
                        cfg,
                    );
                    report.stage("track_maintain", t0.elapsed().as_secs_f64() * 1e3);

                    prev_pyramid = Some(pyramid);
                    prev_frame_t = Some(t_evt);
                }

                report.frames += 1;
                trajectory.push(TrajPoint::from_pose(t_evt, &x.rot_imu, &x.pos_imu));
                frames.push(FrameRecord { t: t_evt, image_index: index, state: x.clone() });
                report.frame_ms.push(ev_start.elapsed().as_secs_f64() * 1e3);
            }
        }
    }

    report.map_points = map.len();
    report.stream_duration = t_state - imu.first().map(|s| s.t).unwrap_or(0.0);
    Ok(RunResult { trajectory, frames, map, report, final_state: x })
}
