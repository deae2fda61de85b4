//! On-disk sequence logs.
//!
//! A log directory contains:
//!   imu.csv             `t,gx,gy,gz,ax,ay,az` per line (header optional)
//!   scans/NNNNNN.bin    packed records: float32 x,y,z + float64 t (LE)
//!   images/NNNNNN.ppm   binary P6, maxval 255
//!   images.csv          `index,t` per line
//!   calib.txt           photometric calibration (see `calib`)
//!   sensors.txt         extrinsics/intrinsics/rates, `key = value`
//!
//! `simulate` additionally writes gt.tum and exposure.csv for evaluation;
//! readers ignore them.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use livo_core::imu::ImuSample;
use livo_core::lio::{LidarScan, ScanPoint};
use livo_core::manifold::Rotation;
use livo_core::photometric::{PhotometricModel, RawImage};
use nalgebra::{Vector3, Vector4};

use crate::scenario::Scenario;
use crate::{EventDesc, PipelineError, Result, SensorMeta, SequenceSource};

fn io_err<T>(path: &Path, e: std::io::Error) -> Result<T> {
    Err(PipelineError::io(path.display().to_string(), e))
}

// --- imu.csv ---------------------------------------------------------------

pub fn format_imu_csv(samples: &[ImuSample]) -> String {
    let mut out = String::from("t,gx,gy,gz,ax,ay,az\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{:?},{},{},{},{},{},{}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.acc.x, s.acc.y, s.acc.z
        );
    }
    out
}

pub fn parse_imu_csv(text: &str, origin: &str) -> Result<Vec<ImuSample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('t') || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse).collect();
        let vals =
            vals.map_err(|e| PipelineError::parse(origin, format!("line {}: {e}", idx + 1)))?;
        if vals.len() != 7 {
            return Err(PipelineError::parse(
                origin,
                format!("line {}: expected 7 fields", idx + 1),
            ));
        }
        out.push(ImuSample {
            t: vals[0],
            gyro: Vector3::new(vals[1], vals[2], vals[3]),
            acc: Vector3::new(vals[4], vals[5], vals[6]),
        });
    }
    Ok(out)
}

// --- scans/NNNNNN.bin --------------------------------------------------------

pub fn encode_scan(scan: &LidarScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.points.len() * 20);
    for p in &scan.points {
        out.extend_from_slice(&(p.pos.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.pos.y as f32).to_le_bytes());
        out.extend_from_slice(&(p.pos.z as f32).to_le_bytes());
        out.extend_from_slice(&p.t.to_le_bytes());
    }
    out
}

pub fn decode_scan(
    bytes: &[u8],
    rot_ext: Rotation,
    pos_ext: Vector3<f64>,
    origin: &str,
) -> Result<LidarScan> {
    if bytes.len() % 20 != 0 {
        return Err(PipelineError::parse(origin, "scan file length not a multiple of 20"));
    }
    let mut points = Vec::with_capacity(bytes.len() / 20);
    let mut t_end = f64::NEG_INFINITY;
    for rec in bytes.chunks_exact(20) {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap()) as f64;
        let t = f64::from_le_bytes(rec[12..20].try_into().unwrap());
        t_end = t_end.max(t);
        points.push(ScanPoint { pos: Vector3::new(x, y, z), t });
    }
    if points.is_empty() {
        return Err(PipelineError::parse(origin, "empty scan"));
    }
    Ok(LidarScan { points, t_end, rot_ext, pos_ext })
}

// --- images ------------------------------------------------------------------

pub fn encode_ppm(width: usize, height: usize, rgb8: &[u8]) -> Vec<u8> {
    assert_eq!(rgb8.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb8);
    out
}

pub fn decode_ppm(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<u8>)> {
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() != 4 || fields[0] != b"P6" {
        return Err(PipelineError::parse(origin, "not a binary P6 file"));
    }
    let parse = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PipelineError::parse(origin, "bad PPM header field"))
    };
    let width = parse(fields[1])?;
    let height = parse(fields[2])?;
    let maxval = parse(fields[3])?;
    if maxval != 255 {
        return Err(PipelineError::parse(origin, "PPM maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(PipelineError::parse(origin, "truncated PPM data"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

// --- sensors.txt ---------------------------------------------------------------

fn format_rot(rot: &Rotation) -> String {
    let mut s = String::new();
    for r in 0..3 {
        for c in 0..3 {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{}", rot[(r, c)]);
        }
    }
    s
}

pub fn format_sensors(meta: &SensorMeta) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "lidar_rot = {}", format_rot(&meta.lidar_rot_ext));
    let _ = writeln!(
        out,
        "lidar_pos = {} {} {}",
        meta.lidar_pos_ext.x, meta.lidar_pos_ext.y, meta.lidar_pos_ext.z
    );
    let _ = writeln!(out, "cam_rot = {}", format_rot(&meta.cam_rot_ext));
    let _ = writeln!(
        out,
        "cam_pos = {} {} {}",
        meta.cam_pos_ext.x, meta.cam_pos_ext.y, meta.cam_pos_ext.z
    );
    let _ = writeln!(
        out,
        "intrinsics = {} {} {} {}",
        meta.intrinsics[0], meta.intrinsics[1], meta.intrinsics[2], meta.intrinsics[3]
    );
    let _ = writeln!(out, "width = {}", meta.width);
    let _ = writeln!(out, "height = {}", meta.height);
    let _ = writeln!(out, "imu_rate = {}", meta.imu_rate);
    let _ = writeln!(out, "cam_rate = {}", meta.cam_rate);
    out
}

pub fn parse_sensors(text: &str, origin: &str) -> Result<SensorMeta> {
    let mut meta = SensorMeta::default();
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
        let key = key.trim();
        let nums: std::result::Result<Vec<f64>, _> =
            value.split_whitespace().map(str::parse).collect();
        let nums =
            nums.map_err(|e| PipelineError::parse(origin, format!("{key}: {e}")))?;
        let rot = |n: &[f64]| -> Result<Rotation> {
            if n.len() != 9 {
                return Err(PipelineError::parse(origin, format!("{key}: expected 9 floats")));
            }
            Ok(Rotation::from_row_slice(n))
        };
        let vec3 = |n: &[f64]| -> Result<Vector3<f64>> {
            if n.len() != 3 {
                return Err(PipelineError::parse(origin, format!("{key}: expected 3 floats")));
            }
            Ok(Vector3::new(n[0], n[1], n[2]))
        };
        match key {
            "lidar_rot" => meta.lidar_rot_ext = rot(&nums)?,
            "lidar_pos" => meta.lidar_pos_ext = vec3(&nums)?,
            "cam_rot" => meta.cam_rot_ext = rot(&nums)?,
            "cam_pos" => meta.cam_pos_ext = vec3(&nums)?,
            "intrinsics" => {
                if nums.len() != 4 {
                    return Err(PipelineError::parse(origin, "intrinsics: expected 4 floats"));
                }
                meta.intrinsics = Vector4::new(nums[0], nums[1], nums[2], nums[3]);
            }
            "width" => meta.width = nums[0] as usize,
            "height" => meta.height = nums[0] as usize,
            "imu_rate" => meta.imu_rate = nums[0],
            "cam_rate" => meta.cam_rate = nums[0],
            _ => return Err(PipelineError::UnknownKey(key.into())),
        }
    }
    Ok(meta)
}

// --- writing a full log --------------------------------------------------------

/// Materialize a scenario as an on-disk sequence log (plus ground truth).
pub fn write_sequence_log(dir: &Path, scenario: &Scenario) -> Result<()> {
    let mut seq = scenario.build();
    fs::create_dir_all(dir.join("scans")).or_else(|e| io_err(dir, e))?;
    fs::create_dir_all(dir.join("images")).or_else(|e| io_err(dir, e))?;

    fs::write(dir.join("imu.csv"), format_imu_csv(seq.imu()))
        .or_else(|e| io_err(&dir.join("imu.csv"), e))?;
    fs::write(dir.join("sensors.txt"), format_sensors(seq.meta()))
        .or_else(|e| io_err(&dir.join("sensors.txt"), e))?;
    crate::calib::write_calibration(&dir.join("calib.txt"), seq.model())?;

    let events = seq.events();
    let mut images_csv = String::new();
    for ev in events {
        match ev {
            EventDesc::Scan { index, .. } => {
                let scan = seq.scan(index)?;
                let path = dir.join(format!("scans/{index:06}.bin"));
                fs::write(&path, encode_scan(&scan)).or_else(|e| io_err(&path, e))?;
            }
            EventDesc::Image { index, t } => {
                let (rgb8, _) = seq.image_rgb8(index);
                let path = dir.join(format!("images/{index:06}.ppm"));
                fs::write(
                    &path,
                    encode_ppm(scenario.meta.width, scenario.meta.height, &rgb8),
                )
                .or_else(|e| io_err(&path, e))?;
                let _ = writeln!(images_csv, "{index},{t:?}");
            }
        }
    }
    fs::write(dir.join("images.csv"), images_csv)
        .or_else(|e| io_err(&dir.join("images.csv"), e))?;

    crate::eval::write_tum(&dir.join("gt.tum"), &scenario.gt_trajectory(100.0))?;
    let mut exposure = String::from("t,tau\n");
    let n = (scenario.duration * 100.0) as usize;
    for k in 0..=n {
        let t = k as f64 / 100.0;
        let _ = writeln!(exposure, "{t:?},{:?}", scenario.tau_at(t));
    }
    fs::write(dir.join("exposure.csv"), exposure)
        .or_else(|e| io_err(&dir.join("exposure.csv"), e))?;
    Ok(())
}

// --- reading ---------------------------------------------------------------------

/// A sequence log opened from disk. Scan and image payloads are read per
/// event; the IMU stream and indices are loaded up front.
pub struct DiskLog {
    dir: PathBuf,
    meta: SensorMeta,
    model: PhotometricModel,
    imu: Vec<ImuSample>,
    scans: Vec<(PathBuf, f64)>,
    images: Vec<(PathBuf, f64)>,
}

impl DiskLog {
    pub fn open(dir: &Path) -> Result<Self> {
        let sensors_path = dir.join("sensors.txt");
        let sensors_text = fs::read_to_string(&sensors_path)
            .or_else(|e| io_err(&sensors_path, e))?;
        let meta = parse_sensors(&sensors_text, &sensors_path.display().to_string())?;
        let model = crate::calib::read_calibration(&dir.join("calib.txt"))?;
        let imu_path = dir.join("imu.csv");
        let imu_text = fs::read_to_string(&imu_path).or_else(|e| io_err(&imu_path, e))?;
        let imu = parse_imu_csv(&imu_text, &imu_path.display().to_string())?;
        if imu.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(PipelineError::Sequence("imu.csv is not time-sorted".into()));
        }

        let mut scans = Vec::new();
        let scans_dir = dir.join("scans");
        let mut names: Vec<PathBuf> = fs::read_dir(&scans_dir)
            .or_else(|e| io_err(&scans_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        names.sort();
        for path in names {
            // Records are time-ordered; the scan end time is the last stamp.
            let mut file = fs::File::open(&path).or_else(|e| io_err(&path, e))?;
            let len = file
                .metadata()
                .or_else(|e| io_err(&path, e))?
                .len();
            if len < 20 || len % 20 != 0 {
                return Err(PipelineError::parse(
                    path.display().to_string(),
                    "scan file length not a multiple of 20",
                ));
            }
            use std::io::Seek;
            file.seek(std::io::SeekFrom::End(-8)).or_else(|e| io_err(&path, e))?;
            let mut buf = [0u8; 8];
            file.read_exact(&mut buf).or_else(|e| io_err(&path, e))?;
            scans.push((path, f64::from_le_bytes(buf)));
        }

        let idx_path = dir.join("images.csv");
        let mut images = Vec::new();
        if idx_path.exists() {
            let text = fs::read_to_string(&idx_path).or_else(|e| io_err(&idx_path, e))?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') || line.starts_with("index") {
                    continue;
                }
                let (i, t) = line.split_once(',').ok_or_else(|| {
                    PipelineError::parse(idx_path.display().to_string(), "expected `index,t`")
                })?;
                let index: usize = i.trim().parse().map_err(|e| {
                    PipelineError::parse(idx_path.display().to_string(), format!("{e}"))
                })?;
                let t: f64 = t.trim().parse().map_err(|e| {
                    PipelineError::parse(idx_path.display().to_string(), format!("{e}"))
                })?;
                images.push((dir.join(format!("images/{index:06}.ppm")), t));
            }
            if images.windows(2).any(|w| w[1].1 <= w[0].1) {
                return Err(PipelineError::Sequence("images.csv is not time-sorted".into()));
            }
        }
        if scans.windows(2).any(|w| w[1].1 <= w[0].1) {
            return Err(PipelineError::Sequence("scans are not time-sorted".into()));
        }

        Ok(DiskLog { dir: dir.to_path_buf(), meta, model, imu, scans, images })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl SequenceSource for DiskLog {
    fn meta(&self) -> &SensorMeta {
        &self.meta
    }

    fn model(&self) -> &PhotometricModel {
        &self.model
    }

    fn imu(&self) -> &[ImuSample] {
        &self.imu
    }

    fn events(&self) -> Vec<EventDesc> {
        let mut events = Vec::new();
        for (i, (_, t_end)) in self.scans.iter().enumerate() {
            events.push(EventDesc::Scan { index: i, t: *t_end });
        }
        for (j, (_, t)) in self.images.iter().enumerate() {
            events.push(EventDesc::Image { index: j, t: *t });
        }
        crate::order_events(events)
    }

    fn scan(&mut self, index: usize) -> Result<LidarScan> {
        let (path, _) = &self.scans[index];
        let bytes = fs::read(path).or_else(|e| io_err(path, e))?;
        decode_scan(
            &bytes,
            self.meta.lidar_rot_ext,
            self.meta.lidar_pos_ext,
            &path.display().to_string(),
        )
    }

    fn image(&mut self, index: usize) -> Result<(RawImage, f64)> {
        let (path, t) = &self.images[index];
        let bytes = fs::read(path).or_else(|e| io_err(path, e))?;
        let (w, h, rgb) = decode_ppm(&bytes, &path.display().to_string())?;
        if w != self.meta.width || h != self.meta.height {
            return Err(PipelineError::Sequence(format!(
                "image {index} is {w}x{h}, sensors.txt says {}x{}",
                self.meta.width, self.meta.height
            )));
        }
        Ok((RawImage::from_rgb8(w, h, &rgb), *t))
    }
}
