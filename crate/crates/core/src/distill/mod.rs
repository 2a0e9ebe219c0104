//! Classical post-processing of sifted DPS keys.
//!
//! Sifting keeps every detection: the receiver's bit is the detector that
//! fired, the sender's is the phase difference of the two pulses that
//! interfered. A random sample of positions is then compared in public and
//! discarded, the remaining keys are reconciled by interactive parity
//! exchange, checked with a universal hash and compressed by a seeded
//! Toeplitz matrix.

mod cascade;
mod keyfile;
mod toeplitz;

pub use cascade::{
    block_parity, pass_permutation, reconcile, reconcile_with, CascadeParams, LocalParitySource,
    ParityOracle, ParityQuery, PassRecord, ReconcileError, Reconciled, ReconciliationTranscript,
};
pub use keyfile::{read_key, write_key};
pub use toeplitz::{privacy_amplify, verification_tag, verify, ToeplitzHash, VERIFY_TAG_BITS};

use rand::seq::index;
use serde::Serialize;
use thiserror::Error;

use crate::rng::stream;
use crate::sim::{Bits, DetectionLog, SenderRecord, SimError};

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("key lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cannot sample an empty key")]
    EmptyKey,
    #[error("sample fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("requested {requested} output bits from a {available}-bit key")]
    OutputTooLong { requested: u64, available: usize },
    #[error("expected a key at stage {expected:?}, found {found:?}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("key file: {0}")]
    KeyFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sifted,
    Sampled,
    Reconciled,
    Final,
}

/// Key bits at one distillation stage, with the classical information
/// disclosed about them so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub bits: Bits,
    pub stage: Stage,
    pub leakage_bits: u64,
    pub session_id: u64,
}

impl KeyMaterial {
    pub fn new(bits: Bits, stage: Stage, session_id: u64) -> Self {
        KeyMaterial {
            bits,
            stage,
            leakage_bits: 0,
            session_id,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// The sender's sifted key for the announced detection slots.
pub fn sender_sift(
    record: &SenderRecord,
    slots: impl IntoIterator<Item = u64>,
) -> Result<KeyMaterial, DistillError> {
    let mut bits = Bits::new();
    for slot in slots {
        let bit = record
            .phase_difference(slot)
            .ok_or(SimError::SlotOutOfRange {
                slot,
                slot_count: record.phases.len() as u64,
            })?;
        bits.push(bit);
    }
    Ok(KeyMaterial::new(bits, Stage::Sifted, record.session_id))
}

/// The receiver's sifted key: one bit per logged event, the detector id.
pub fn receiver_sift(log: &DetectionLog) -> KeyMaterial {
    let bits: Bits = log.events.iter().map(|e| e.detector_id == 1).collect();
    KeyMaterial::new(bits, Stage::Sifted, log.session_id)
}

/// Sifted keys of both parties. Only the slot indices are announced, so no
/// key information leaks.
pub fn sift(
    record: &SenderRecord,
    log: &DetectionLog,
) -> Result<(KeyMaterial, KeyMaterial), DistillError> {
    if record.session_id != log.session_id {
        return Err(SimError::SessionMismatch {
            record: record.session_id,
            log: log.session_id,
        }
        .into());
    }
    let sender = sender_sift(record, log.events.iter().map(|e| e.slot_index))?;
    Ok((sender, receiver_sift(log)))
}

/// Sorted sample positions: `round(fraction * n)` of them, at least one.
pub fn sample_positions(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, DistillError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DistillError::InvalidFraction(fraction));
    }
    if n == 0 {
        return Err(DistillError::EmptyKey);
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut positions = index::sample(&mut stream(seed, "qber-sample"), n, k).into_vec();
    positions.sort_unstable();
    Ok(positions)
}

/// Copy of `bits` without the given sorted positions.
pub fn remove_positions(bits: &Bits, sorted_positions: &[usize]) -> Bits {
    let mut out = Bits::with_capacity(bits.len() - sorted_positions.len());
    let mut skip = sorted_positions.iter().peekable();
    for (i, bit) in bits.iter().by_vals().enumerate() {
        if skip.peek() == Some(&&i) {
            skip.next();
        } else {
            out.push(bit);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QberEstimate {
    pub estimate: f64,
    pub sampled: usize,
    pub mismatches: usize,
}

/// Estimates the QBER on a seeded random sample and discards the sampled bits.
/// Disclosed sample bits are removed rather than counted as leakage.
pub fn estimate_qber(
    a: &KeyMaterial,
    b: &KeyMaterial,
    sample_fraction: f64,
    seed: u64,
) -> Result<(QberEstimate, KeyMaterial, KeyMaterial), DistillError> {
    if a.len() != b.len() {
        return Err(DistillError::LengthMismatch(a.len(), b.len()));
    }
    let positions = sample_positions(a.len(), sample_fraction, seed)?;
    let mismatches = positions.iter().filter(|&&i| a.bits[i] != b.bits[i]).count();
    let est = QberEstimate {
        estimate: mismatches as f64 / positions.len() as f64,
        sampled: positions.len(),
        mismatches,
    };
    let strip = |k: &KeyMaterial| KeyMaterial {
        bits: remove_positions(&k.bits, &positions),
        stage: Stage::Sampled,
        leakage_bits: k.leakage_bits,
        session_id: k.session_id,
    };
    Ok((est, strip(a), strip(b)))
}

/// Length of the privacy-amplified key, `max(0, floor(n tau) - leakage - margin)`.
pub fn final_length(n: u64, tau: f64, leakage_bits: u64, margin_bits: u64) -> u64 {
    let retained = (n as f64 * tau.clamp(0.0, 1.0)).floor() as u64;
    retained.saturating_sub(leakage_bits.saturating_add(margin_bits))
}
