//! Two-party distillation over a framed byte stream.
//!
//! The sender holds the simulated physics (phases and the receiver's
//! detection log) and transfers the log as the stand-in for the quantum
//! channel; this transfer is not a security boundary. Every classical step
//! after that is a real message. Exchange is strictly alternating:
//!
//! ```text
//! S -> R  Hello          [version u8]
//! R -> S  Hello          [version u8]
//! S -> R  EventTransfer  [session_id u64][config sha256, 32 bytes][event file]
//! R -> S  SiftAnnounce   [count u64][slot u64]*
//! S -> R  SiftAnnounce   [classical seed u64][sifted length u64]
//! R -> S  Sample         [count u64][position u64]*[receiver bits, key encoding]
//! S -> R  Sample         [sender bits, key encoding]
//! R -> S  Parity         [count u32][pass u32, start u32, end u32]*      } repeated
//! S -> R  Parity         [count u32][answers packed LSB-first]          }
//! R -> S  Flip           [converged u8][passes u32][flips u64]
//! S -> R  Verify         [sender tag u64]
//! R -> S  Verify         [accepted u8][receiver tag u64]
//! S -> R  PaSeed         [seed u64][final length u64]
//! R -> S  Done           []
//! ```
//!
//! Either side may answer any message with `Error` carrying a UTF-8 reason,
//! after which both sides stop. Bit strings use the key-file encoding.

use std::io::{Read, Write};

use thiserror::Error;

use crate::distill::{
    privacy_amplify, read_key, receiver_sift, reconcile_with, remove_positions, sample_positions,
    sender_sift, verification_tag, write_key, CascadeParams, DistillError, KeyMaterial,
    LocalParitySource, ParityOracle, ParityQuery, QberEstimate, ReconcileError,
    ReconciliationTranscript, Stage, VERIFY_TAG_BITS,
};
use crate::frame::{write_frame, Frame, FrameError, FrameReader, MsgType};
use crate::params::ExperimentConfig;
use crate::pipeline::{
    classical_seed, plan_final_length, qber_hint, ClassicalSeeds, DistillOptions, DistillSummary,
    RunReport,
};
use crate::security::SecurityError;
use crate::sim::{read_detection_log, write_detection_log};
use crate::sim::{Bits, DetectionLog, SenderRecord, SimError};

pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("expected a {expected:?} frame, got {got:?}")]
    Unexpected { expected: MsgType, got: MsgType },
    #[error("connection closed while waiting for a {0:?} frame")]
    Closed(MsgType),
    #[error("malformed {msg_type:?} frame: {reason}")]
    Malformed { msg_type: MsgType, reason: String },
    #[error("peer reported an error: {0}")]
    Peer(String),
    #[error("config digest mismatch: ours {ours}, peer {theirs}")]
    ConfigMismatch { ours: String, theirs: String },
    #[error("{0}")]
    Protocol(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Security(#[from] SecurityError),
}

/// One party's result. Verification failure is reported here, not as an error.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub report: RunReport,
    pub key: KeyMaterial,
    pub transcript: Option<ReconciliationTranscript>,
}

struct PayloadWriter(Vec<u8>);

impl PayloadWriter {
    fn new() -> Self {
        PayloadWriter(Vec::new())
    }
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn bytes(mut self, v: &[u8]) -> Self {
        self.0.extend_from_slice(v);
        self
    }
    fn frame(self, t: MsgType) -> Frame {
        Frame::new(t, self.0)
    }
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    msg_type: MsgType,
}

impl<'a> PayloadReader<'a> {
    fn new(msg_type: MsgType, bytes: &'a [u8]) -> Self {
        PayloadReader {
            bytes,
            pos: 0,
            msg_type,
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> SessionError {
        SessionError::Malformed {
            msg_type: self.msg_type,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SessionError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed(format!(
                "needs {n} bytes at offset {}, has {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, SessionError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, SessionError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, SessionError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count followed by that many items of `item_len` bytes; checked
    /// against the remaining payload before anything is allocated.
    fn count(&mut self, n: u64, item_len: usize) -> Result<usize, SessionError> {
        let left = (self.bytes.len() - self.pos) / item_len;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= left)
            .ok_or_else(|| self.malformed(format!("count {n} exceeds the payload")))
    }

    fn bits(&mut self) -> Result<Bits, SessionError> {
        let left = self.bytes.len() - self.pos;
        let len = self
            .bytes
            .get(self.pos..self.pos + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| self.malformed("missing bit-string length"))?;
        if len.div_ceil(8) > (left - 8) as u64 {
            return Err(self.malformed(format!("bit string of {len} bits exceeds the payload")));
        }
        let raw = self.take(8 + len.div_ceil(8) as usize)?;
        read_key(raw).map_err(|e| self.malformed(e.to_string()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    fn end(&self) -> Result<(), SessionError> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

struct Channel<R, W> {
    reader: FrameReader<R>,
    writer: W,
}

impl<R: Read, W: Write> Channel<R, W> {
    fn send(&mut self, frame: Frame) -> Result<(), SessionError> {
        write_frame(&mut self.writer, &frame)?;
        Ok(())
    }

    fn recv(&mut self, expected: MsgType) -> Result<Vec<u8>, SessionError> {
        let frame = self
            .reader
            .read_frame()?
            .ok_or(SessionError::Closed(expected))?;
        match frame.msg_type {
            t if t == expected => Ok(frame.payload),
            MsgType::Error => Err(SessionError::Peer(
                String::from_utf8_lossy(&frame.payload).into_owned(),
            )),
            got => Err(SessionError::Unexpected { expected, got }),
        }
    }

    /// Best-effort notice to the peer before giving up.
    fn abort(&mut self, err: &SessionError) {
        if !matches!(err, SessionError::Peer(_) | SessionError::Frame(FrameError::Io(_))) {
            let _ = write_frame(
                &mut self.writer,
                &Frame::new(MsgType::Error, err.to_string().into_bytes()),
            );
        }
    }

    fn hello_check(payload: &[u8]) -> Result<(), SessionError> {
        let mut r = PayloadReader::new(MsgType::Hello, payload);
        let v = r.u8()?;
        r.end()?;
        if v != PROTOCOL_VERSION {
            return Err(SessionError::Protocol(format!(
                "peer speaks protocol version {v}, expected {PROTOCOL_VERSION}"
            )));
        }
        Ok(())
    }
}

fn sampled_bits(key: &Bits, positions: &[usize]) -> Bits {
    positions.iter().map(|&i| key[i]).collect()
}

/// Sender side: owns the simulated session and answers the receiver.
pub fn run_sender<R: Read, W: Write>(
    reader: R,
    writer: W,
    config: &ExperimentConfig,
    record: &SenderRecord,
    log: &DetectionLog,
) -> Result<SessionOutcome, SessionError> {
    let mut ch = Channel {
        reader: FrameReader::new(reader),
        writer,
    };
    sender_steps(&mut ch, config, record, log).inspect_err(|e| ch.abort(e))
}

fn sender_steps<R: Read, W: Write>(
    ch: &mut Channel<R, W>,
    config: &ExperimentConfig,
    record: &SenderRecord,
    log: &DetectionLog,
) -> Result<SessionOutcome, SessionError> {
    if record.session_id != log.session_id {
        return Err(SimError::SessionMismatch {
            record: record.session_id,
            log: log.session_id,
        }
        .into());
    }
    ch.send(PayloadWriter::new().u8(PROTOCOL_VERSION).frame(MsgType::Hello))?;
    Channel::<R, W>::hello_check(&ch.recv(MsgType::Hello)?)?;

    let digest = hex::decode(config.digest()).expect("digest is hex");
    ch.send(
        PayloadWriter::new()
            .u64(record.session_id)
            .bytes(&digest)
            .bytes(&write_detection_log(log))
            .frame(MsgType::EventTransfer),
    )?;

    let payload = ch.recv(MsgType::SiftAnnounce)?;
    let mut r = PayloadReader::new(MsgType::SiftAnnounce, &payload);
    let count = r.u64()?;
    let count = r.count(count, 8)?;
    let slots = (0..count).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    r.end()?;
    let a = sender_sift(record, slots)?;
    let sifted_bits = a.len() as u64;
    let classical = classical_seed(record.seed);
    let seeds = ClassicalSeeds::from_classical(classical);
    ch.send(
        PayloadWriter::new()
            .u64(classical)
            .u64(sifted_bits)
            .frame(MsgType::SiftAnnounce),
    )?;

    let payload = ch.recv(MsgType::Sample)?;
    let mut r = PayloadReader::new(MsgType::Sample, &payload);
    let k = r.u64()?;
    let k = r.count(k, 8)?;
    let positions = (0..k)
        .map(|_| r.u64().map(|p| p as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let their_bits = r.bits()?;
    r.end()?;
    if positions.windows(2).any(|w| w[0] >= w[1])
        || positions.last().is_some_and(|&p| p >= a.len())
        || their_bits.len() != positions.len()
    {
        return Err(SessionError::Protocol(
            "sample positions must be increasing, in range and match the bits sent".into(),
        ));
    }
    let ours = sampled_bits(&a.bits, &positions);
    let mismatches = (ours.clone() ^ their_bits).count_ones();
    let sample = (!positions.is_empty()).then(|| QberEstimate {
        estimate: mismatches as f64 / positions.len() as f64,
        sampled: positions.len(),
        mismatches,
    });
    ch.send(PayloadWriter::new().bytes(&write_key(&ours)).frame(MsgType::Sample))?;
    let a = KeyMaterial {
        bits: remove_positions(&a.bits, &positions),
        stage: Stage::Sampled,
        ..a
    };

    let mut source = LocalParitySource::new(&a.bits, seeds.cascade);
    let (converged, passes, flips) = loop {
        let frame = ch.reader.read_frame()?.ok_or(SessionError::Closed(MsgType::Parity))?;
        match frame.msg_type {
            MsgType::Parity => {
                let mut r = PayloadReader::new(MsgType::Parity, &frame.payload);
                let n = r.u32()?;
                let n = r.count(u64::from(n), 12)?;
                let queries = (0..n)
                    .map(|_| {
                        Ok(ParityQuery {
                            pass: r.u32()?,
                            start: r.u32()?,
                            end: r.u32()?,
                        })
                    })
                    .collect::<Result<Vec<_>, SessionError>>()?;
                r.end()?;
                let answers = source.parities(&queries).map_err(|e| SessionError::Malformed {
                    msg_type: MsgType::Parity,
                    reason: e.to_string(),
                })?;
                let packed: Bits = answers.into_iter().collect();
                let packed = write_key(&packed);
                ch.send(
                    PayloadWriter::new()
                        .u32(queries.len() as u32)
                        .bytes(&packed[8..])
                        .frame(MsgType::Parity),
                )?;
            }
            MsgType::Flip => {
                let mut r = PayloadReader::new(MsgType::Flip, &frame.payload);
                let out = (r.u8()? != 0, r.u32()?, r.u64()?);
                r.end()?;
                break out;
            }
            MsgType::Error => {
                return Err(SessionError::Peer(
                    String::from_utf8_lossy(&frame.payload).into_owned(),
                ))
            }
            got => {
                return Err(SessionError::Unexpected {
                    expected: MsgType::Parity,
                    got,
                })
            }
        }
    };
    let parities = source.answered;
    let a = KeyMaterial {
        stage: Stage::Reconciled,
        leakage_bits: a.leakage_bits + parities + VERIFY_TAG_BITS as u64,
        ..a
    };

    let tag = verification_tag(&a.bits, seeds.verify);
    ch.send(PayloadWriter::new().u64(tag).frame(MsgType::Verify))?;
    let payload = ch.recv(MsgType::Verify)?;
    let mut r = PayloadReader::new(MsgType::Verify, &payload);
    let accepted = r.u8()? != 0;
    let their_tag = r.u64()?;
    r.end()?;
    let verified = accepted && their_tag == tag;

    let (tau, m) = plan_final_length(
        config,
        a.len() as u64,
        sample.map(|q| q.estimate),
        a.leakage_bits,
        verified,
    )?;
    ch.send(
        PayloadWriter::new()
            .u64(seeds.privacy)
            .u64(m)
            .frame(MsgType::PaSeed),
    )?;
    PayloadReader::new(MsgType::Done, &ch.recv(MsgType::Done)?).end()?;

    let key = privacy_amplify(&a, m, seeds.privacy)?;
    let summary = DistillSummary {
        slot_count: log.slot_count,
        session_id: record.session_id,
        sifted_bits,
        sample,
        reconciled_bits: a.len() as u64,
        parities,
        passes,
        flips,
        converged,
        verified,
        tau,
        final_bits: m,
    };
    let report = RunReport::new(config, Some(record.seed), &summary, &key.bits)?;
    Ok(SessionOutcome {
        report,
        key,
        transcript: None,
    })
}

struct RemoteParity<'c, R, W> {
    ch: &'c mut Channel<R, W>,
}

impl<R: Read, W: Write> ParityOracle for RemoteParity<'_, R, W> {
    type Error = SessionError;

    fn parities(&mut self, queries: &[ParityQuery]) -> Result<Vec<bool>, SessionError> {
        let mut w = PayloadWriter::new().u32(queries.len() as u32);
        for q in queries {
            w = w.u32(q.pass).u32(q.start).u32(q.end);
        }
        self.ch.send(w.frame(MsgType::Parity))?;
        let payload = self.ch.recv(MsgType::Parity)?;
        let mut r = PayloadReader::new(MsgType::Parity, &payload);
        let n = r.u32()? as usize;
        let packed = r.rest();
        if n != queries.len() || packed.len() != n.div_ceil(8) {
            return Err(SessionError::Malformed {
                msg_type: MsgType::Parity,
                reason: format!("{n} answers in {} bytes for {} queries", packed.len(), queries.len()),
            });
        }
        Ok((0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect())
    }
}

/// Receiver side: drives sampling and reconciliation.
pub fn run_receiver<R: Read, W: Write>(
    reader: R,
    writer: W,
    config: &ExperimentConfig,
    opts: &DistillOptions,
) -> Result<SessionOutcome, SessionError> {
    let mut ch = Channel {
        reader: FrameReader::new(reader),
        writer,
    };
    receiver_steps(&mut ch, config, opts).inspect_err(|e| ch.abort(e))
}

fn receiver_steps<R: Read, W: Write>(
    ch: &mut Channel<R, W>,
    config: &ExperimentConfig,
    opts: &DistillOptions,
) -> Result<SessionOutcome, SessionError> {
    Channel::<R, W>::hello_check(&ch.recv(MsgType::Hello)?)?;
    ch.send(PayloadWriter::new().u8(PROTOCOL_VERSION).frame(MsgType::Hello))?;

    let payload = ch.recv(MsgType::EventTransfer)?;
    let mut r = PayloadReader::new(MsgType::EventTransfer, &payload);
    let session_id = r.u64()?;
    let theirs = hex::encode(r.take(32)?);
    let ours = config.digest();
    if theirs != ours {
        return Err(SessionError::ConfigMismatch { ours, theirs });
    }
    let log = read_detection_log(r.rest(), session_id)?;

    let b = receiver_sift(&log);
    let mut w = PayloadWriter::new().u64(log.events.len() as u64);
    for e in &log.events {
        w = w.u64(e.slot_index);
    }
    ch.send(w.frame(MsgType::SiftAnnounce))?;

    let payload = ch.recv(MsgType::SiftAnnounce)?;
    let mut r = PayloadReader::new(MsgType::SiftAnnounce, &payload);
    let classical = r.u64()?;
    let n = r.u64()?;
    r.end()?;
    if n != b.len() as u64 {
        return Err(SessionError::Protocol(format!(
            "sender sifted {n} bits, receiver {}",
            b.len()
        )));
    }
    let seeds = ClassicalSeeds::from_classical(classical);

    let positions = if b.is_empty() {
        Vec::new()
    } else {
        sample_positions(b.len(), opts.sample_fraction, seeds.sample)?
    };
    let ours = sampled_bits(&b.bits, &positions);
    let mut w = PayloadWriter::new().u64(positions.len() as u64);
    for &p in &positions {
        w = w.u64(p as u64);
    }
    ch.send(w.bytes(&write_key(&ours)).frame(MsgType::Sample))?;
    let payload = ch.recv(MsgType::Sample)?;
    let mut r = PayloadReader::new(MsgType::Sample, &payload);
    let theirs = r.bits()?;
    r.end()?;
    if theirs.len() != ours.len() {
        return Err(SessionError::Protocol(format!(
            "sender returned {} sample bits for {} positions",
            theirs.len(),
            ours.len()
        )));
    }
    let mismatches = (ours ^ theirs).count_ones();
    let sample = (!positions.is_empty()).then(|| QberEstimate {
        estimate: mismatches as f64 / positions.len() as f64,
        sampled: positions.len(),
        mismatches,
    });
    let b = KeyMaterial {
        bits: remove_positions(&b.bits, &positions),
        stage: Stage::Sampled,
        ..b
    };

    let params = CascadeParams {
        min_passes: opts.min_passes,
        max_passes: opts.max_passes,
        seed: seeds.cascade,
    };
    let hint = qber_hint(sample.map(|q| q.estimate));
    let rec = match reconcile_with(&mut RemoteParity { ch }, &b, hint, &params) {
        Ok(r) => r,
        Err(ReconcileError::NonConvergence { partial, .. }) => *partial,
        Err(ReconcileError::Oracle(e)) => return Err(e),
        Err(e) => return Err(SessionError::Protocol(format!("reconciliation: {e}"))),
    };
    let t = &rec.transcript;
    let (passes, flips) = (t.rounds.len() as u32, t.flip_count() as u64);
    ch.send(
        PayloadWriter::new()
            .u8(u8::from(t.converged))
            .u32(passes)
            .u64(flips)
            .frame(MsgType::Flip),
    )?;

    let payload = ch.recv(MsgType::Verify)?;
    let mut r = PayloadReader::new(MsgType::Verify, &payload);
    let their_tag = r.u64()?;
    r.end()?;
    let mut b = rec.key;
    b.leakage_bits += VERIFY_TAG_BITS as u64;
    let tag = verification_tag(&b.bits, seeds.verify);
    let verified = tag == their_tag;
    ch.send(
        PayloadWriter::new()
            .u8(u8::from(verified))
            .u64(tag)
            .frame(MsgType::Verify),
    )?;

    let payload = ch.recv(MsgType::PaSeed)?;
    let mut r = PayloadReader::new(MsgType::PaSeed, &payload);
    let pa_seed = r.u64()?;
    let m = r.u64()?;
    r.end()?;
    let (tau, own_m) = plan_final_length(
        config,
        b.len() as u64,
        sample.map(|q| q.estimate),
        b.leakage_bits,
        verified,
    )?;
    if m != own_m {
        return Err(SessionError::Protocol(format!(
            "sender chose a {m}-bit final key, receiver computes {own_m}"
        )));
    }
    ch.send(Frame::new(MsgType::Done, Vec::new()))?;

    let key = privacy_amplify(&b, m, pa_seed)?;
    let summary = DistillSummary {
        slot_count: log.slot_count,
        session_id,
        sifted_bits: n,
        sample,
        reconciled_bits: b.len() as u64,
        parities: rec.transcript.total_parities,
        passes,
        flips,
        converged: rec.transcript.converged,
        verified,
        tau,
        final_bits: m,
    };
    let report = RunReport::new(config, None, &summary, &key.bits)?;
    Ok(SessionOutcome {
        report,
        key,
        transcript: Some(rec.transcript),
    })
}
