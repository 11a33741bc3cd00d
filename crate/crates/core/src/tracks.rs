//! JSON-lines feature tracks: one stereo frame per line.
//!
//! ```text
//! {"frame":0,"points":[{"u":..,"v":..,"d":..,"desc":"<64 hex>","id":7}],
//!  "lines":[{"px":..,"py":..,"qx":..,"qy":..,"dp":..,"dq":..,"desc":"<64 hex>"}]}
//! ```
//!
//! Depth may replace disparity: `z` for points, `zp`/`zq` for line endpoints.
//! Depths are converted with `d = b·f / Z`. `id` is ground truth and optional.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BinaryDescriptor, LineObservation, PointObservation};
use crate::lie::{depth_to_disparity, StereoCamera, Vec2};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Frame {
    pub index: u64,
    pub points: Vec<PointObservation>,
    pub lines: Vec<LineObservation>,
}

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointRecord {
    u: f64,
    v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<f64>,
    desc: BinaryDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    px: f64,
    py: f64,
    qx: f64,
    qy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zq: Option<f64>,
    desc: BinaryDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame: u64,
    #[serde(default)]
    points: Vec<PointRecord>,
    #[serde(default)]
    lines: Vec<LineRecord>,
}

fn disparity(d: Option<f64>, z: Option<f64>, cam: &StereoCamera, what: &str) -> Result<f64, String> {
    match (d, z) {
        (Some(d), None) if d > 0.0 && d.is_finite() => Ok(d),
        (Some(d), None) => Err(format!("{what}: disparity must be positive, got {d}")),
        (None, Some(z)) => depth_to_disparity(z, cam.baseline, cam.fx).map_err(|e| format!("{what}: {e}")),
        (Some(_), Some(_)) => Err(format!("{what}: give either disparity or depth, not both")),
        (None, None) => Err(format!("{what}: missing disparity or depth")),
    }
}

/// Parses one JSONL record. `line` is used for error messages only.
pub fn parse_frame(text: &str, line: usize, cam: &StereoCamera) -> Result<Frame, TrackError> {
    let schema = |message: String| TrackError::Schema { line, message };
    let rec: FrameRecord = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    let mut frame = Frame { index: rec.frame, ..Frame::default() };
    for (i, p) in rec.points.into_iter().enumerate() {
        let d = disparity(p.d, p.z, cam, &format!("point {i}")).map_err(schema)?;
        frame.points.push(PointObservation { u: p.u, v: p.v, disparity: d, descriptor: p.desc, landmark_hint: p.id });
    }
    for (i, l) in rec.lines.into_iter().enumerate() {
        let dp = disparity(l.dp, l.zp, cam, &format!("line {i} endpoint p")).map_err(schema)?;
        let dq = disparity(l.dq, l.zq, cam, &format!("line {i} endpoint q")).map_err(schema)?;
        frame.lines.push(LineObservation {
            p: Vec2::new(l.px, l.py),
            q: Vec2::new(l.qx, l.qy),
            disp_p: dp,
            disp_q: dq,
            descriptor: l.desc,
            landmark_hint: l.id,
        });
    }
    Ok(frame)
}

/// Serializes a frame as one JSON line (no trailing newline), disparities only.
pub fn frame_to_json(frame: &Frame) -> String {
    let rec = FrameRecord {
        frame: frame.index,
        points: frame
            .points
            .iter()
            .map(|p| PointRecord { u: p.u, v: p.v, d: Some(p.disparity), z: None, desc: p.descriptor, id: p.landmark_hint })
            .collect(),
        lines: frame
            .lines
            .iter()
            .map(|l| LineRecord {
                px: l.p.x,
                py: l.p.y,
                qx: l.q.x,
                qy: l.q.y,
                dp: Some(l.disp_p),
                dq: Some(l.disp_q),
                zp: None,
                zq: None,
                desc: l.descriptor,
                id: l.landmark_hint,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("frame serializes")
}

/// Reads every frame; blank lines are skipped.
pub fn read_tracks(reader: impl BufRead, cam: &StereoCamera) -> Result<Vec<Frame>, TrackError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_frame(&line, n + 1, cam)?);
    }
    Ok(out)
}

pub fn write_tracks<'a>(mut writer: impl Write, frames: impl IntoIterator<Item = &'a Frame>) -> std::io::Result<()> {
    for f in frames {
        writeln!(writer, "{}", frame_to_json(f))?;
    }
    Ok(())
}
