//! Binary event files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 0   4  magic "DPSQ"
//! 4   1  version (1)
//! 5   1  kind: 0 = detection log, 1 = sender record
//! 6   2  reserved, zero
//! 8   8  slot_count (u64)
//! 16  .. body
//! ```
//!
//! A detection log body is a sequence of 13-byte records: `slot_index` (u64),
//! `detector_id` (u8), `time_offset` (i32, picoseconds). A sender record body
//! is the phase bits packed LSB-first, `ceil(slot_count / 8)` bytes.

use super::{Bits, DetectionEvent, DetectionLog, SenderRecord, SimError};

pub const EVENT_FILE_MAGIC: &[u8; 4] = b"DPSQ";
pub const EVENT_FILE_VERSION: u8 = 1;

const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 13;
const KIND_LOG: u8 = 0;
const KIND_RECORD: u8 = 1;

fn header(kind: u8, slot_count: u64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(EVENT_FILE_MAGIC);
    h[4] = EVENT_FILE_VERSION;
    h[5] = kind;
    h[8..].copy_from_slice(&slot_count.to_le_bytes());
    h
}

fn bad(msg: impl Into<String>) -> SimError {
    SimError::EventFile(msg.into())
}

fn parse_header(bytes: &[u8], kind: u8) -> Result<u64, SimError> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != EVENT_FILE_MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != EVENT_FILE_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != kind {
        return Err(bad(format!("expected file kind {kind}, found {}", bytes[5])));
    }
    Ok(u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")))
}

pub fn write_detection_log(log: &DetectionLog) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * log.events.len());
    out.extend_from_slice(&header(KIND_LOG, log.slot_count));
    for e in &log.events {
        out.extend_from_slice(&e.slot_index.to_le_bytes());
        out.push(e.detector_id);
        out.extend_from_slice(&e.time_offset_ps.to_le_bytes());
    }
    out
}

/// Parses a detection log. The session id is not stored in the file.
pub fn read_detection_log(bytes: &[u8], session_id: u64) -> Result<DetectionLog, SimError> {
    let slot_count = parse_header(bytes, KIND_LOG)?;
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) {
        return Err(bad(format!(
            "body of {} bytes is not a whole number of records",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for rec in body.chunks_exact(RECORD_LEN) {
        let e = DetectionEvent {
            slot_index: u64::from_le_bytes(rec[..8].try_into().expect("8 bytes")),
            detector_id: rec[8],
            time_offset_ps: i32::from_le_bytes(rec[9..13].try_into().expect("4 bytes")),
        };
        if e.detector_id > 1 {
            return Err(bad(format!("detector id {} at slot {}", e.detector_id, e.slot_index)));
        }
        if e.slot_index == 0 || e.slot_index >= slot_count {
            return Err(SimError::SlotOutOfRange {
                slot: e.slot_index,
                slot_count,
            });
        }
        if let Some(prev) = events.last().map(|p: &DetectionEvent| p.slot_index) {
            if e.slot_index <= prev {
                return Err(SimError::UnsortedInput {
                    previous: prev,
                    slot: e.slot_index,
                });
            }
        }
        events.push(e);
    }
    Ok(DetectionLog {
        events,
        session_id,
        slot_count,
    })
}

pub fn write_sender_record(record: &SenderRecord) -> Vec<u8> {
    let n = record.phases.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n.div_ceil(8));
    out.extend_from_slice(&header(KIND_RECORD, n as u64));
    let mut byte = 0u8;
    for (i, bit) in record.phases.iter().by_vals().enumerate() {
        byte |= u8::from(bit) << (i % 8);
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if !n.is_multiple_of(8) {
        out.push(byte);
    }
    out
}

pub fn read_sender_record(bytes: &[u8], session_id: u64, seed: u64) -> Result<SenderRecord, SimError> {
    let slot_count = parse_header(bytes, KIND_RECORD)?;
    let n = usize::try_from(slot_count).map_err(|_| bad("slot count too large"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n.div_ceil(8) {
        return Err(bad(format!(
            "expected {} phase bytes, found {}",
            n.div_ceil(8),
            body.len()
        )));
    }
    let mut phases = Bits::with_capacity(n);
    phases.extend((0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1));
    Ok(SenderRecord {
        phases,
        session_id,
        seed,
    })
}
