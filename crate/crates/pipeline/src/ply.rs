//! PLY export of the radiance map: binary little-endian, float32 positions
//! and 8-bit colors tone-mapped at a fixed exposure. The extended variant
//! appends float32 radiance channels.

use std::io::Write as _;
use std::path::Path;

use livo_core::map::VoxelMap;

use crate::{PipelineError, Result};

/// Serialize the map. Colors are `clamp(exposure * radiance, 0, 1) * 255`
/// (linear tone map at the documented fixed exposure).
pub fn encode_ply(map: &VoxelMap, exposure: f64, float_radiance: bool) -> Vec<u8> {
    let n = map.len();
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {n}\n"));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if float_radiance {
        header.push_str(
            "property float radiance_r\nproperty float radiance_g\nproperty float radiance_b\n",
        );
    }
    header.push_str("end_header\n");

    let stride = 15 + if float_radiance { 12 } else { 0 };
    let mut out = Vec::with_capacity(header.len() + n * stride);
    out.extend_from_slice(header.as_bytes());
    for pt in map.points() {
        for c in 0..3 {
            out.extend_from_slice(&(pt.pos[c] as f32).to_le_bytes());
        }
        for c in 0..3 {
            let tone = (exposure * pt.radiance[c]).clamp(0.0, 1.0);
            out.push((tone * 255.0).round() as u8);
        }
        if float_radiance {
            for c in 0..3 {
                out.extend_from_slice(&(pt.radiance[c] as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn write_ply(path: &Path, map: &VoxelMap, exposure: f64, float_radiance: bool) -> Result<()> {
    let bytes = encode_ply(map, exposure, float_radiance);
    let mut file = std::fs::File::create(path)
        .map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| PipelineError::io(path.display().to_string(), e))
}

/// Minimal reader for the files this module writes (testing aid).
pub fn decode_ply(bytes: &[u8], origin: &str) -> Result<Vec<([f32; 3], [u8; 3])>> {
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| PipelineError::parse(origin, "no end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| PipelineError::parse(origin, "non-utf8 header"))?;
    let n: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| PipelineError::parse(origin, "missing element vertex"))?;
    let float_radiance = header.contains("radiance_r");
    let stride = 15 + if float_radiance { 12 } else { 0 };
    let body = &bytes[header_end..];
    if body.len() != n * stride {
        return Err(PipelineError::parse(
            origin,
            format!("body is {} bytes, expected {}", body.len(), n * stride),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for rec in body.chunks_exact(stride) {
        let mut pos = [0f32; 3];
        for c in 0..3 {
            pos[c] = f32::from_le_bytes(rec[c * 4..c * 4 + 4].try_into().unwrap());
        }
        out.push((pos, [rec[12], rec[13], rec[14]]));
    }
    Ok(out)
}
