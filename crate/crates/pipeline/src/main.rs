use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use livo_core::PipelineConfig;
use livo_pipeline::eval::{evaluate_ape, read_tum, write_tum, TrajPoint};
use livo_pipeline::log::{write_sequence_log, DiskLog};
use livo_pipeline::pipeline::{run_pipeline, RunResult};
use livo_pipeline::scenario::Scenario;
use livo_pipeline::{config_file, SequenceSource};

/// LiDAR-inertial-visual odometry with radiance mapping, plus the synthetic
/// sequence generator used for evaluation.
#[derive(Parser)]
#[command(name = "livo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Sequence input: a log directory, a scenario file, or a scenario
    /// preset name (corner_room, corner_room_noisy, corridor,
    /// exposure_sweep, throughput).
    #[arg(long)]
    input: String,
    /// Optional `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the estimator over a sequence and write trajectory + report.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Also export the radiance map as PLY.
        #[arg(long)]
        ply: bool,
        /// Tone-map exposure for PLY colors (s).
        #[arg(long, default_value_t = 0.002)]
        ply_exposure: f64,
    },
    /// Generate a synthetic sequence log on disk from a scenario.
    Simulate {
        /// Scenario preset name or scenario file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the estimator and export the radiance map as PLY.
    ExportPly {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "map.ply")]
        out: PathBuf,
        /// Tone-map exposure for the 8-bit colors (s).
        #[arg(long, default_value_t = 0.002)]
        exposure: f64,
        /// Append float32 radiance channels.
        #[arg(long)]
        radiance_float: bool,
    },
    /// Run the estimator, then render the map at the pose of a chosen
    /// frame over an exposure stack and merge to HDR.
    RenderHdr {
        #[command(flatten)]
        input: InputArgs,
        /// Frame index whose estimated pose is rendered.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Comma-separated exposure times in seconds.
        #[arg(long, default_value = "0.001,0.002,0.005,0.01")]
        exposures: String,
        #[arg(long, default_value = "hdr_out")]
        out_dir: PathBuf,
    },
    /// Absolute position error between two TUM trajectories.
    EvaluateApe {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Association tolerance (s).
        #[arg(long, default_value_t = 0.01)]
        max_dt: f64,
    },
}

fn load_config(input: &InputArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &input.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        config_file::apply_text(&mut cfg, &text, &path.display().to_string())?;
    }
    for set in &input.sets {
        config_file::apply_override(&mut cfg, set)?;
    }
    Ok(cfg)
}

fn open_source(input: &str) -> anyhow::Result<Box<dyn SequenceSource>> {
    let path = Path::new(input);
    if path.is_dir() {
        return Ok(Box::new(DiskLog::open(path)?));
    }
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let scenario = Scenario::from_text(&text, &path.display().to_string())?;
        return Ok(Box::new(scenario.build()));
    }
    if let Some(preset) = Scenario::preset(input) {
        return Ok(Box::new(preset.build()));
    }
    bail!("input `{input}` is neither a directory, a scenario file, nor a preset name")
}

fn load_scenario(spec: &str) -> anyhow::Result<Scenario> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return Ok(Scenario::from_text(&text, &path.display().to_string())?);
    }
    Scenario::preset(spec)
        .with_context(|| format!("`{spec}` is neither a scenario file nor a preset"))
}

fn run_over(input: &InputArgs) -> anyhow::Result<(RunResult, PipelineConfig)> {
    let cfg = load_config(input)?;
    let mut source = open_source(&input.input)?;
    let result = run_pipeline(source.as_mut(), &cfg)?;
    Ok((result, cfg))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { input, out_dir, ply, ply_exposure } => {
            let (result, _) = run_over(&input)?;
            std::fs::create_dir_all(&out_dir)?;
            write_tum(&out_dir.join("trajectory.tum"), &result.trajectory)?;
            std::fs::write(out_dir.join("report.txt"), result.report.to_text())?;
            if ply {
                livo_pipeline::ply::write_ply(
                    &out_dir.join("map.ply"),
                    &result.map,
                    ply_exposure,
                    false,
                )?;
            }
            print!("{}", result.report.to_text());
            println!("wrote {}", out_dir.display());
        }
        Command::Simulate { scenario, out_dir, seed } => {
            let mut scenario = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            std::fs::create_dir_all(&out_dir)?;
            write_sequence_log(&out_dir, &scenario)?;
            println!("wrote sequence log to {}", out_dir.display());
        }
        Command::ExportPly { input, out, exposure, radiance_float } => {
            let (result, _) = run_over(&input)?;
            livo_pipeline::ply::write_ply(&out, &result.map, exposure, radiance_float)?;
            println!("wrote {} ({} points)", out.display(), result.map.len());
        }
        Command::RenderHdr { input, frame, exposures, out_dir } => {
            let exposures: Vec<f64> = exposures
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .context("parsing --exposures")?;
            if exposures.is_empty() {
                bail!("need at least one exposure");
            }
            let (result, _) = run_over(&input)?;
            let Some(rec) = result.frames.get(frame) else {
                bail!("frame {frame} out of range ({} frames)", result.frames.len());
            };
            let rot_wc = rec.state.rot_imu * rec.state.rot_ext;
            let pos_wc = rec.state.rot_imu * rec.state.pos_ext + rec.state.pos_imu;
            let source = open_source(&input.input)?;
            let meta = source.meta().clone();
            let model = source.model().clone();
            if result.map.points().iter().all(|p| !p.rad_initialized) {
                eprintln!("warning: map has no radiance-initialized points; images will be empty");
            }
            let (ldrs, hdr) = livo_pipeline::hdr::render_hdr(
                &result.map,
                &rot_wc,
                &pos_wc,
                &meta.intrinsics,
                meta.width,
                meta.height,
                &model,
                &exposures,
            );
            std::fs::create_dir_all(&out_dir)?;
            for (k, img) in ldrs.iter().enumerate() {
                livo_pipeline::hdr::write_ppm(
                    &out_dir.join(format!("ldr_{:.0}us.ppm", exposures[k] * 1e6)),
                    img,
                )?;
            }
            livo_pipeline::hdr::write_pfm(&out_dir.join("merged_hdr.pfm"), &hdr)?;
            let covered = hdr.covered.iter().filter(|c| **c).count();
            println!(
                "wrote {} LDR renders + merged_hdr.pfm ({covered} covered pixels) to {}",
                exposures.len(),
                out_dir.display()
            );
        }
        Command::EvaluateApe { est, gt, max_dt } => {
            let est_traj: Vec<TrajPoint> = read_tum(&est)?;
            let gt_traj: Vec<TrajPoint> = read_tum(&gt)?;
            match evaluate_ape(&est_traj, &gt_traj, max_dt) {
                Ok(stats) => println!(
                    "APE over {} matched poses: rmse {:.4} m, mean {:.4} m, max {:.4} m",
                    stats.matched, stats.rmse, stats.mean, stats.max
                ),
                Err(msg) => bail!("APE evaluation failed: {msg}"),
            }
        }
    }
    Ok(())
}
