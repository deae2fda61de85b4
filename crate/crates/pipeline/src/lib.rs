//! Everything around the estimation core that touches the outside world:
//! sequence logs on disk, scenario-driven synthetic sequences, the
//! measurement-ordered fusion pipeline with its run report, trajectory/PLY/
//! HDR exporters, and trajectory evaluation.

pub mod calib;
pub mod config_file;
pub mod eval;
pub mod hdr;
pub mod log;
pub mod pipeline;
pub mod ply;
pub mod scenario;

use livo_core::manifold::Rotation;
use nalgebra::{Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("sequence invalid: {0}")]
    Sequence(String),
    #[error("imu: {0}")]
    Imu(#[from] livo_core::imu::ImuError),
    #[error("photometric: {0}")]
    Photometric(#[from] livo_core::photometric::PhotometricError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Parse { path: path.into(), message: message.into() }
    }
}

/// Geometric calibration of the rig: fixed LiDAR extrinsic, initial camera
/// extrinsic/intrinsics, image size and nominal rates.
#[derive(Clone, Debug)]
pub struct SensorMeta {
    pub lidar_rot_ext: Rotation,
    pub lidar_pos_ext: Vector3<f64>,
    pub cam_rot_ext: Rotation,
    pub cam_pos_ext: Vector3<f64>,
    pub intrinsics: Vector4<f64>,
    pub width: usize,
    pub height: usize,
    pub imu_rate: f64,
    pub cam_rate: f64,
}

impl Default for SensorMeta {
    fn default() -> Self {
        Self {
            lidar_rot_ext: Rotation::identity(),
            lidar_pos_ext: Vector3::zeros(),
            cam_rot_ext: livo_core::sim::camera_forward_extrinsic(),
            cam_pos_ext: Vector3::zeros(),
            intrinsics: Vector4::new(500.0, 500.0, 320.0, 240.0),
            width: 640,
            height: 480,
            imu_rate: 200.0,
            cam_rate: 10.0,
        }
    }
}

/// One timestamp-ordered measurement event. LiDAR sorts before camera on
/// timestamp ties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventDesc {
    Scan { index: usize, t: f64 },
    Image { index: usize, t: f64 },
}

impl EventDesc {
    pub fn t(&self) -> f64 {
        match self {
            EventDesc::Scan { t, .. } | EventDesc::Image { t, .. } => *t,
        }
    }

    fn tie_rank(&self) -> u8 {
        match self {
            EventDesc::Scan { .. } => 0,
            EventDesc::Image { .. } => 1,
        }
    }
}

/// Sort events by time, LiDAR first on ties.
pub fn order_events(mut events: Vec<EventDesc>) -> Vec<EventDesc> {
    events.sort_by(|a, b| {
        a.t()
            .total_cmp(&b.t())
            .then(a.tie_rank().cmp(&b.tie_rank()))
    });
    events
}

/// A replayable measurement sequence: IMU stream plus lazily fetched scans
/// and images.
pub trait SequenceSource {
    fn meta(&self) -> &SensorMeta;
    fn model(&self) -> &livo_core::photometric::PhotometricModel;
    fn imu(&self) -> &[livo_core::imu::ImuSample];
    fn events(&self) -> Vec<EventDesc>;
    fn scan(&mut self, index: usize) -> Result<livo_core::lio::LidarScan>;
    /// Raw image for event `index` with its capture timestamp.
    fn image(&mut self, index: usize) -> Result<(livo_core::photometric::RawImage, f64)>;
}
