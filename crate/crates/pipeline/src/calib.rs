//! Photometric calibration file: three 256-knot response curves plus the
//! vignette raster.
//!
//! ```text
//! CRF v1
//! <256 floats>            red channel knots, ascending
//! <256 floats>            green
//! <256 floats>            blue
//! VIGNETTE <W> <H>
//! <W floats>              H rows, row-major
//! ...
//! ```
//!
//! Floats are written in shortest round-trip form, so write + parse is
//! bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use livo_core::photometric::{PhotometricModel, ResponseCurve, VignetteMap};

use crate::{PipelineError, Result};

pub fn format_calibration(model: &PhotometricModel) -> String {
    let mut out = String::new();
    out.push_str("CRF v1\n");
    for curve in &model.crf {
        let mut first = true;
        for k in curve.knots() {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{k}");
            first = false;
        }
        out.push('\n');
    }
    let v = &model.vignette;
    let _ = writeln!(out, "VIGNETTE {} {}", v.width, v.height);
    for row in 0..v.height {
        let mut first = true;
        for col in 0..v.width {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{}", v.at(col, row));
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn parse_calibration(text: &str, origin: &str) -> Result<PhotometricModel> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().unwrap_or("");
    if header.trim() != "CRF v1" {
        return Err(PipelineError::parse(origin, "expected `CRF v1` header"));
    }
    let mut curves = Vec::with_capacity(3);
    for channel in ["red", "green", "blue"] {
        let line = lines
            .next()
            .ok_or_else(|| PipelineError::parse(origin, format!("missing {channel} curve")))?;
        let knots: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse).collect();
        let knots = knots
            .map_err(|e| PipelineError::parse(origin, format!("{channel} curve: {e}")))?;
        let curve = ResponseCurve::from_knots(knots).map_err(|e| {
            PipelineError::parse(origin, format!("{channel} curve invalid: {e}"))
        })?;
        curves.push(curve);
    }
    let vig_header = lines
        .next()
        .ok_or_else(|| PipelineError::parse(origin, "missing VIGNETTE section"))?;
    let mut parts = vig_header.split_whitespace();
    if parts.next() != Some("VIGNETTE") {
        return Err(PipelineError::parse(origin, "expected `VIGNETTE W H`"));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PipelineError::parse(origin, "bad vignette width"))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PipelineError::parse(origin, "bad vignette height"))?;
    let mut data = Vec::with_capacity(width * height);
    for line in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| PipelineError::parse(origin, format!("vignette value: {e}")))?;
            data.push(v);
        }
    }
    if data.len() != width * height {
        return Err(PipelineError::parse(
            origin,
            format!("vignette has {} values, expected {}", data.len(), width * height),
        ));
    }
    let vignette = VignetteMap::new(width, height, data)
        .map_err(|e| PipelineError::parse(origin, format!("vignette: {e}")))?;
    let mut it = curves.into_iter();
    Ok(PhotometricModel {
        crf: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
        vignette,
    })
}

pub fn write_calibration(path: &Path, model: &PhotometricModel) -> Result<()> {
    std::fs::write(path, format_calibration(model))
        .map_err(|e| PipelineError::io(path.display().to_string(), e))
}

pub fn read_calibration(path: &Path) -> Result<PhotometricModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::io(path.display().to_string(), e))?;
    parse_calibration(&text, &path.display().to_string())
}
