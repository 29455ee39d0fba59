//! Line-delimited JSON files.
//!
//! Every file starts with a header object naming its record kind and the
//! schema version, for example
//!
//! ```text
//! {"format":"labeled_frames","version":1}
//! {"t":0.0,"skeletons":[{"id":0,"keypoints":[[0.1,0.2,1.4],null,...]}]}
//! ```
//!
//! Record kinds:
//!
//! * `fused_frames`: one pipeline output frame per line.
//! * `labeled_frames`: `{t, skeletons: [{id, keypoints: [[x,y,z] | null; 12]}]}`
//!   in label order; used for ground truth and for evaluation input.
//! * `measurement_stream`: the header also carries `devices` (mounting and
//!   timing of each device); each line is one batch with its arrival time.
//!
//! Positions are meters, times are seconds unless suffixed `_us`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::association::{KeypointObservation, Measurement, MeasurementBatch};
use crate::metrics::{LabeledFrame, LabeledSkeleton};
use crate::pipeline::FusedFrame;
use crate::skeleton::KeypointLabel;

use super::scene::{Arrival, DeviceSpec};

pub const FILE_VERSION: u32 = 1;
pub const FUSED_FRAMES: &str = "fused_frames";
pub const LABELED_FRAMES: &str = "labeled_frames";
pub const MEASUREMENT_STREAM: &str = "measurement_stream";

#[derive(Debug, Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    devices: Option<Vec<DeviceSpec>>,
}

/// Writes a header then one JSON record per line.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W, format: &str) -> io::Result<Self> {
        Self::with_header(
            out,
            &Header {
                format: format.to_string(),
                version: FILE_VERSION,
                devices: None,
            },
        )
    }

    fn with_header(mut out: W, header: &Header) -> io::Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(JsonlWriter { out })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Non-empty lines with their 1-based line numbers; the first is the header.
fn lines(r: impl BufRead) -> Result<Vec<(usize, String)>, FileError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_header(line: usize, text: &str) -> Result<Header, FileError> {
    let h: Header = serde_json::from_str(text).map_err(|e| FileError::Parse {
        line,
        message: format!("header: {e}"),
    })?;
    if h.version != FILE_VERSION {
        return Err(FileError::Header(format!(
            "unsupported version {} (expected {FILE_VERSION})",
            h.version
        )));
    }
    Ok(h)
}

fn expect_format(h: &Header, format: &str) -> Result<(), FileError> {
    if h.format == format {
        Ok(())
    } else {
        Err(FileError::Header(format!("expected `{format}` records, found `{}`", h.format)))
    }
}

fn parse_records<T: DeserializeOwned>(body: &[(usize, String)], strict: bool) -> Result<Vec<T>, FileError> {
    let mut out = Vec::with_capacity(body.len());
    for (line, text) in body {
        match serde_json::from_str(text) {
            Ok(r) => out.push(r),
            Err(e) if strict => {
                return Err(FileError::Parse {
                    line: *line,
                    message: e.to_string(),
                })
            }
            Err(e) => log::warn!("skipping malformed line {line}: {e}"),
        }
    }
    Ok(out)
}

pub fn write_fused_frames(out: impl Write, frames: &[FusedFrame]) -> io::Result<()> {
    let mut w = JsonlWriter::new(out, FUSED_FRAMES)?;
    for f in frames {
        w.write(f)?;
    }
    w.flush()
}

pub fn read_fused_frames(r: impl BufRead) -> Result<Vec<FusedFrame>, FileError> {
    let lines = lines(r)?;
    let Some((first, rest)) = lines.split_first() else {
        return Ok(Vec::new());
    };
    expect_format(&parse_header(first.0, &first.1)?, FUSED_FRAMES)?;
    parse_records(rest, true)
}

pub fn write_labeled_frames(out: impl Write, frames: &[LabeledFrame]) -> io::Result<()> {
    let mut w = JsonlWriter::new(out, LABELED_FRAMES)?;
    for f in frames {
        w.write(f)?;
    }
    w.flush()
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamRecord {
    arrival: f64,
    device_id: u32,
    timestamp_us: u64,
    persons: Vec<[Option<KeypointObservation>; KeypointLabel::COUNT]>,
}

/// A recorded device stream with the device extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub devices: Vec<DeviceSpec>,
    pub arrivals: Vec<Arrival>,
}

pub fn write_stream(out: impl Write, devices: &[DeviceSpec], arrivals: &[Arrival]) -> io::Result<()> {
    let header = Header {
        format: MEASUREMENT_STREAM.to_string(),
        version: FILE_VERSION,
        devices: Some(devices.to_vec()),
    };
    let mut w = JsonlWriter::with_header(out, &header)?;
    for a in arrivals {
        w.write(&StreamRecord {
            arrival: a.arrival,
            device_id: a.batch.device_id,
            timestamp_us: a.batch.timestamp_us,
            persons: a.batch.measurements.iter().map(|m| m.keypoints).collect(),
        })?;
    }
    w.flush()
}

pub fn read_stream(r: impl BufRead) -> Result<Recording, FileError> {
    let lines = lines(r)?;
    let Some((first, rest)) = lines.split_first() else {
        return Err(FileError::Header("empty stream file".into()));
    };
    let header = parse_header(first.0, &first.1)?;
    expect_format(&header, MEASUREMENT_STREAM)?;
    let records: Vec<StreamRecord> = parse_records(rest, true)?;
    let arrivals = records
        .into_iter()
        .map(|r| Arrival {
            arrival: r.arrival,
            batch: MeasurementBatch {
                device_id: r.device_id,
                timestamp_us: r.timestamp_us,
                measurements: r
                    .persons
                    .into_iter()
                    .map(|keypoints| Measurement {
                        device_id: r.device_id,
                        timestamp_us: r.timestamp_us,
                        keypoints,
                    })
                    .collect(),
            },
        })
        .collect();
    Ok(Recording {
        devices: header.devices.unwrap_or_default(),
        arrivals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointFormat {
    /// `labeled_frames` or `fused_frames` files written by this crate.
    Native,
    /// Panoptic-style body exports, see [`panoptic_frame`].
    Panoptic,
}

impl std::str::FromStr for KeypointFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(KeypointFormat::Native),
            "panoptic" => Ok(KeypointFormat::Panoptic),
            other => Err(format!("unknown keypoint format `{other}` (native, panoptic)")),
        }
    }
}

/// Load a keypoint sequence for evaluation. Malformed lines are an error
/// naming the line under `strict`, otherwise they are skipped with a
/// warning. Frames are returned sorted by time; out-of-order timestamps
/// are reported as a warning.
pub fn load_keypoint_file(path: impl AsRef<Path>, format: KeypointFormat, strict: bool) -> Result<Vec<LabeledFrame>, FileError> {
    let file = File::open(path.as_ref())?;
    read_keypoints(BufReader::new(file), format, strict)
}

pub fn read_keypoints(r: impl BufRead, format: KeypointFormat, strict: bool) -> Result<Vec<LabeledFrame>, FileError> {
    let lines = lines(r)?;
    let mut frames = match format {
        KeypointFormat::Native => {
            let Some((first, rest)) = lines.split_first() else {
                return Ok(Vec::new());
            };
            let header = parse_header(first.0, &first.1)?;
            match header.format.as_str() {
                LABELED_FRAMES => parse_records(rest, strict)?,
                FUSED_FRAMES => parse_records::<FusedFrame>(rest, strict)?
                    .iter()
                    .map(FusedFrame::to_labeled)
                    .collect(),
                other => return Err(FileError::Header(format!("`{other}` files hold no keypoint frames"))),
            }
        }
        KeypointFormat::Panoptic => {
            let mut out = Vec::new();
            for (line, text) in &lines {
                match serde_json::from_str::<Value>(text)
                    .map_err(|e| e.to_string())
                    .and_then(|v| panoptic_frame(&v))
                {
                    Ok(f) => out.push(f),
                    Err(message) if strict => return Err(FileError::Parse { line: *line, message }),
                    Err(message) => log::warn!("skipping malformed line {line}: {message}"),
                }
            }
            out
        }
    };
    if frames.windows(2).any(|w| w[1].t < w[0].t) {
        log::warn!("keypoint file timestamps are not monotone; frames were reordered");
        frames.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    Ok(frames)
}

/// `joints19` slots for each label, in label order.
const PANOPTIC_SLOTS: [usize; KeypointLabel::COUNT] = [3, 9, 4, 10, 5, 11, 6, 12, 7, 13, 8, 14];

/// Convert one Panoptic-style record
/// `{"univTime": ms | "t": s, "bodies": [{"id", "joints19": [x, y, z, c] * 19}]}`.
///
/// Panoptic coordinates are centimeters with y pointing down; they are
/// mapped to meters in a z-up frame as `(x, z, -y) / 100`. Joints with a
/// non-positive confidence are treated as absent.
pub fn panoptic_frame(v: &Value) -> Result<LabeledFrame, String> {
    let t = match (v.get("t").and_then(Value::as_f64), v.get("univTime").and_then(Value::as_f64)) {
        (Some(t), _) => t,
        (None, Some(ms)) => ms * 1e-3,
        _ => return Err("missing `t` or `univTime`".into()),
    };
    let bodies = v
        .get("bodies")
        .and_then(Value::as_array)
        .ok_or("missing `bodies` array")?;
    let mut skeletons = Vec::with_capacity(bodies.len());
    for body in bodies {
        let id = body.get("id").and_then(Value::as_u64).ok_or("body without an integer `id`")?;
        let joints: Vec<f64> = body
            .get("joints19")
            .and_then(Value::as_array)
            .ok_or("body without `joints19`")?
            .iter()
            .map(|x| x.as_f64().ok_or("non-numeric joint value"))
            .collect::<Result<_, _>>()?;
        if joints.len() != 19 * 4 {
            return Err(format!("`joints19` has {} values, expected 76", joints.len()));
        }
        let keypoints = std::array::from_fn(|k| {
            let j = &joints[PANOPTIC_SLOTS[k] * 4..PANOPTIC_SLOTS[k] * 4 + 4];
            (j[3] > 0.0).then(|| Vector3::new(j[0], j[2], -j[1]) * 0.01)
        });
        skeletons.push(LabeledSkeleton { id, keypoints });
    }
    Ok(LabeledFrame { t, skeletons })
}
