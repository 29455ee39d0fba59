//! Length-prefixed little-endian binary frames.
//!
//! ```text
//! u32  payload length (bytes after this field)
//! u8   version (= 1)
//! u32  device id
//! u64  capture time, µs
//! u16  person count
//! per person, 12 slots in label order:
//!     u8 present, f32 x, f32 y, f32 z, f32 confidence
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::association::{KeypointObservation, Measurement, MeasurementBatch};
use crate::skeleton::KeypointLabel;

pub const WIRE_VERSION: u8 = 1;
const HEADER_LEN: usize = 1 + 4 + 8 + 2;
const SLOT_LEN: usize = 1 + 4 * 4;
pub const PERSON_LEN: usize = SLOT_LEN * KeypointLabel::COUNT;

pub type PersonSlots = [Option<KeypointObservation>; KeypointLabel::COUNT];

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub device_id: u32,
    pub timestamp_us: u64,
    pub persons: Vec<PersonSlots>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("length prefix {declared} does not match a frame of {persons} persons ({expected} bytes)")]
    BadLength {
        declared: usize,
        persons: usize,
        expected: usize,
    },
    #[error("invalid presence flag {0}")]
    BadFlag(u8),
}

impl WireMessage {
    pub fn from_batch(batch: &MeasurementBatch) -> Self {
        WireMessage {
            device_id: batch.device_id,
            timestamp_us: batch.timestamp_us,
            persons: batch.measurements.iter().map(|m| m.keypoints).collect(),
        }
    }

    pub fn into_batch(self) -> MeasurementBatch {
        let WireMessage {
            device_id,
            timestamp_us,
            persons,
        } = self;
        MeasurementBatch {
            device_id,
            timestamp_us,
            measurements: persons
                .into_iter()
                .map(|keypoints| Measurement {
                    device_id,
                    timestamp_us,
                    keypoints,
                })
                .collect(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + HEADER_LEN + self.persons.len() * PERSON_LEN
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    assert!(msg.persons.len() <= u16::MAX as usize, "too many persons for one frame");
    let mut out = Vec::with_capacity(msg.encoded_len());
    let payload = (HEADER_LEN + msg.persons.len() * PERSON_LEN) as u32;
    out.extend_from_slice(&payload.to_le_bytes());
    out.push(WIRE_VERSION);
    out.extend_from_slice(&msg.device_id.to_le_bytes());
    out.extend_from_slice(&msg.timestamp_us.to_le_bytes());
    out.extend_from_slice(&(msg.persons.len() as u16).to_le_bytes());
    for person in &msg.persons {
        for slot in person {
            match slot {
                Some(k) => {
                    out.push(1);
                    for v in k.position {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.extend_from_slice(&k.confidence.to_le_bytes());
                }
                None => {
                    out.push(0);
                    out.extend_from_slice(&[0u8; 16]);
                }
            }
        }
    }
    out
}

/// Single-person convenience wrapper.
pub fn encode_measurement(m: &Measurement) -> Vec<u8> {
    encode(&WireMessage {
        device_id: m.device_id,
        timestamp_us: m.timestamp_us,
        persons: vec![m.keypoints],
    })
}

pub fn decode_measurement(bytes: &[u8]) -> Result<Measurement, CodecError> {
    let (msg, _) = decode(bytes)?;
    let batch = msg.into_batch();
    let declared = batch.measurements.len();
    batch.measurements.into_iter().next().ok_or(CodecError::BadLength {
        declared,
        persons: 0,
        expected: HEADER_LEN + PERSON_LEN,
    })
}

fn take<const N: usize>(bytes: &[u8], at: &mut usize) -> [u8; N] {
    let out: [u8; N] = bytes[*at..*at + N].try_into().expect("length checked");
    *at += N;
    out
}

/// Decode one frame from the front of `bytes`; returns the message and
/// the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let declared = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if declared < HEADER_LEN {
        return Err(CodecError::BadLength {
            declared,
            persons: 0,
            expected: HEADER_LEN,
        });
    }
    let total = 4 + declared;
    if bytes.len() < total {
        return Err(CodecError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    decode_payload(&bytes[4..total]).map(|m| (m, total))
}

fn decode_payload(p: &[u8]) -> Result<WireMessage, CodecError> {
    let mut at = 0;
    let version = p[0];
    at += 1;
    if version != WIRE_VERSION {
        return Err(CodecError::Version(version));
    }
    let device_id = u32::from_le_bytes(take(p, &mut at));
    let timestamp_us = u64::from_le_bytes(take(p, &mut at));
    let count = u16::from_le_bytes(take(p, &mut at)) as usize;
    let expected = HEADER_LEN + count * PERSON_LEN;
    if p.len() != expected {
        return Err(CodecError::BadLength {
            declared: p.len(),
            persons: count,
            expected,
        });
    }
    let mut persons = Vec::with_capacity(count);
    for _ in 0..count {
        let mut slots: PersonSlots = [None; KeypointLabel::COUNT];
        for slot in &mut slots {
            let flag = p[at];
            at += 1;
            let x = f32::from_le_bytes(take(p, &mut at));
            let y = f32::from_le_bytes(take(p, &mut at));
            let z = f32::from_le_bytes(take(p, &mut at));
            let c = f32::from_le_bytes(take(p, &mut at));
            *slot = match flag {
                0 => None,
                1 => Some(KeypointObservation {
                    position: [x, y, z],
                    confidence: c,
                }),
                other => return Err(CodecError::BadFlag(other)),
            };
        }
        persons.push(slots);
    }
    Ok(WireMessage {
        device_id,
        timestamp_us,
        persons,
    })
}

pub fn write_frame(mut w: impl Write, msg: &WireMessage) -> io::Result<()> {
    w.write_all(&encode(msg))
}

/// Read one frame from a stream. `Ok(None)` on a clean end of stream.
pub fn read_frame(mut r: impl Read) -> io::Result<Option<WireMessage>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let declared = u32::from_le_bytes(len) as usize;
    if declared > HEADER_LEN + u16::MAX as usize * PERSON_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame length out of range"));
    }
    let mut buf = vec![0u8; 4 + declared];
    buf[..4].copy_from_slice(&len);
    r.read_exact(&mut buf[4..])?;
    decode(&buf)
        .map(|(m, _)| Some(m))
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
