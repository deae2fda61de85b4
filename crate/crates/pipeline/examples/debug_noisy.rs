use livo_core::PipelineConfig;
use livo_pipeline::pipeline::{run_pipeline, run_pipeline_with_map};
use livo_pipeline::scenario::Scenario;

fn run(tag: &str, scenario: &Scenario, cfg: &PipelineConfig) {
    let mut seq = scenario.build();
    let result = run_pipeline(&mut seq, cfg).unwrap();
    let p = result.trajectory.last().unwrap();
    let (rot_gt, pos_gt) = scenario.gt_pose_relative(p.t);
    let pe = (p.pos - pos_gt).norm();
    let re = livo_core::manifold::so3_log(&(rot_gt.transpose() * p.rotation()))
        .norm()
        .to_degrees();
    let rec = &result.final_state;
    let g_err = livo_core::manifold::so3_log(
        &livo_core::manifold::so3_exp(
            &(rec.gravity.normalize().cross(&scenario.traj.gravity.normalize())
                * (rec.gravity.normalize().dot(&scenario.traj.gravity.normalize())).acos()),
        ),
    );
    let _ = g_err;
    let g_angle = rec
        .gravity
        .normalize()
        .dot(&scenario.traj.gravity.normalize())
        .clamp(-1.0, 1.0)
        .acos()
        .to_degrees();
    println!(
        "{tag:<22} pos_err={pe:8.4} rot_err={re:7.3} ba=({:+.3},{:+.3},{:+.3}) bg=({:+.4},{:+.4},{:+.4}) g_err={g_angle:6.3} deg={}",
        rec.bias_acc.x, rec.bias_acc.y, rec.bias_acc.z,
        rec.bias_gyro.x, rec.bias_gyro.y, rec.bias_gyro.z,
        result.report.degenerate_scans
    );
}

fn oracle_map(scenario: &Scenario, cfg: &PipelineConfig) -> livo_core::map::VoxelMap {
    let mut map = livo_core::map::VoxelMap::new(
        cfg.voxel_size,
        cfg.map_resolution,
        cfg.activation_window,
    );
    let world = scenario.world();
    let mut pts = Vec::new();
    for plane in &world.planes {
        let step = 0.012;
        let nu = (2.0 * plane.half_u / step) as i64;
        let nv = (2.0 * plane.half_v / step) as i64;
        for i in 0..nu {
            for k in 0..nv {
                let u = -plane.half_u + i as f64 * step;
                let v = -plane.half_v + k as f64 * step;
                pts.push((plane.support + plane.axis_u * u + plane.axis_v * v, 0.0));
            }
        }
    }
    map.insert_points(&pts, cfg.lidar_sigma);
    map
}

fn run_oracle(tag: &str, scenario: &Scenario, cfg: &PipelineConfig) {
    let map = oracle_map(scenario, cfg);
    let mut seq = scenario.build();
    std::env::set_var("LIVO_FREEZE_MAP_AFTER", "0");
    let result = run_pipeline_with_map(&mut seq, cfg, Some(map)).unwrap();
    std::env::remove_var("LIVO_FREEZE_MAP_AFTER");
    for p in result.trajectory.iter().step_by(15).take(10) {
        let (_, pos_gt) = scenario.gt_pose_relative(p.t);
        println!("    t={:5.2} pos_err={:9.5}", p.t, (p.pos - pos_gt).norm());
    }
    let p = result.trajectory.last().unwrap();
    let (rot_gt, pos_gt) = scenario.gt_pose_relative(p.t);
    let pe = (p.pos - pos_gt).norm();
    let re = livo_core::manifold::so3_log(&(rot_gt.transpose() * p.rotation()))
        .norm()
        .to_degrees();
    let rec = &result.final_state;
    println!(
        "{tag:<22} pos_err={pe:8.4} rot_err={re:7.3} ba=({:+.3},{:+.3},{:+.3}) bg=({:+.4},{:+.4},{:+.4}) deg={}",
        rec.bias_acc.x, rec.bias_acc.y, rec.bias_acc.z,
        rec.bias_gyro.x, rec.bias_gyro.y, rec.bias_gyro.z,
        result.report.degenerate_scans
    );
}

fn main() {
    let mut base = Scenario::corner_room().with_nominal_noise();
    base.duration = 12.0;
    base.traj.duration = 12.0;
    let mut lio = PipelineConfig::default();
    lio.enable_vio = false;

    run("baseline", &base, &lio);
    let mut clean_scan = base.clone();
    clean_scan.lidar_sigma = 0.0;
    run_oracle("oracle-map-cleanscan", &clean_scan, &lio);
    run_oracle("oracle-map", &base, &lio);

    // No IMU noise/bias at all: isolates the LiDAR residual stream.
    let mut clean_imu = base.clone();
    clean_imu.imu_noise = livo_core::config::NoiseParams {
        gyro_noise_density: 0.0,
        acc_noise_density: 0.0,
        gyro_bias_rw: 0.0,
        acc_bias_rw: 0.0,
    };
    clean_imu.bias = Default::default();
    run("clean-imu", &clean_imu, &lio);

    // Small LiDAR noise.
    let mut small_sigma = base.clone();
    small_sigma.lidar_sigma = 0.005;
    let mut cfg5 = lio.clone();
    cfg5.lidar_sigma = 0.005;
    run("sigma-5mm", &small_sigma, &cfg5);

    // Coarser map resolution: plane fits span more surface.
    let mut res5 = lio.clone();
    res5.map_resolution = 0.05;
    run("res-5cm", &base, &res5);

    // Bigger plane-fit neighborhoods.
    let mut k20 = lio.clone();
    k20.knn_k = 20;
    run("k-20", &base, &k20);
}
