//! The full distillation run, simulated link to final key, and its report.

use std::convert::Infallible;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distill::{
    estimate_qber, final_length, privacy_amplify, reconcile, sift, verify, write_key,
    CascadeParams, DistillError, KeyMaterial, QberEstimate, ReconcileError,
    ReconciliationTranscript, Stage, VERIFY_TAG_BITS,
};
use crate::params::ExperimentConfig;
use crate::rng::derive_seed;
use crate::security::{
    binary_entropy, compression_factor, rate_point, security_threshold, RatePoint,
    SecurityError, COLLISION_PEAK_QBER,
};
use crate::sim::{simulate_session, Bits, DetectionLog, SenderRecord, SimError};

pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.1;
/// Range the sampled QBER is clamped to before it sets the first block size.
pub const QBER_HINT_RANGE: (f64, f64) = (1e-3, 0.25);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptions {
    pub sample_fraction: f64,
    pub min_passes: u32,
    pub max_passes: u32,
}

impl Default for DistillOptions {
    fn default() -> Self {
        DistillOptions {
            sample_fraction: DEFAULT_SAMPLE_FRACTION,
            min_passes: 4,
            max_passes: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error("reconciliation: {0}")]
    Reconcile(String),
}

/// Seeds for the public classical steps, all derived from one value that the
/// sender announces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassicalSeeds {
    pub sample: u64,
    pub cascade: u64,
    pub verify: u64,
    pub privacy: u64,
}

impl ClassicalSeeds {
    pub fn from_classical(classical: u64) -> Self {
        ClassicalSeeds {
            sample: derive_seed(classical, "sample"),
            cascade: derive_seed(classical, "cascade"),
            verify: derive_seed(classical, "verify"),
            privacy: derive_seed(classical, "privacy-amplification"),
        }
    }
}

pub fn classical_seed(master_seed: u64) -> u64 {
    derive_seed(master_seed, "classical")
}

pub fn qber_hint(estimate: Option<f64>) -> f64 {
    estimate
        .unwrap_or(0.0)
        .clamp(QBER_HINT_RANGE.0, QBER_HINT_RANGE.1)
}

/// Compression factor applied to the key; zero at or beyond the peak of the
/// collision bound, where the formula no longer bounds anything.
pub fn key_compression(estimate: f64, mu: f64) -> Result<f64, SecurityError> {
    if estimate >= COLLISION_PEAK_QBER {
        return Ok(0.0);
    }
    compression_factor(estimate, mu)
}

/// Everything either party learns during distillation; enough to build a
/// [`RunReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSummary {
    pub slot_count: u64,
    pub session_id: u64,
    pub sifted_bits: u64,
    pub sample: Option<QberEstimate>,
    pub reconciled_bits: u64,
    pub parities: u64,
    pub passes: u32,
    pub flips: u64,
    pub converged: bool,
    pub verified: bool,
    pub tau: Option<f64>,
    pub final_bits: u64,
}

/// Length of the amplified key and the compression factor behind it.
pub fn plan_final_length(
    config: &ExperimentConfig,
    reconciled_bits: u64,
    estimate: Option<f64>,
    leakage_bits: u64,
    verified: bool,
) -> Result<(Option<f64>, u64), SecurityError> {
    let tau = estimate
        .map(|e| key_compression(e, config.source.mean_photon_number))
        .transpose()?;
    let m = match tau {
        Some(t) if verified => final_length(
            reconciled_bits,
            t,
            leakage_bits,
            config.protocol.pa_margin_bits,
        ),
        _ => 0,
    };
    Ok((tau, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measured {
    pub sifted_bits: u64,
    pub sifted_rate_hz: f64,
    /// Sampled mismatches plus reconciliation flips over the sifted length.
    pub qber: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyLengths {
    pub sifted: u64,
    pub sampled_out: u64,
    pub reconciled: u64,
    #[serde(rename = "final")]
    pub final_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Leakage {
    pub reconciliation_parities: u64,
    pub verification_bits: u64,
    pub total_disclosed: u64,
    pub margin_bits: u64,
    /// `f h2(e) n` at the estimated QBER, for comparison with the parities.
    pub analytic_ec_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconciliationSummary {
    pub passes: u32,
    pub flips: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config_digest: String,
    pub seed: Option<u64>,
    pub slots: u64,
    pub session_id: u64,
    pub analytic: RatePoint,
    pub measured: Measured,
    pub estimated_qber: Option<f64>,
    pub security_threshold: f64,
    pub below_threshold: Option<bool>,
    pub tau: Option<f64>,
    pub keys: KeyLengths,
    pub leakage: Leakage,
    pub reconciliation: ReconciliationSummary,
    pub verified: bool,
    pub final_key_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl RunReport {
    pub fn new(
        config: &ExperimentConfig,
        seed: Option<u64>,
        s: &DistillSummary,
        final_key: &Bits,
    ) -> Result<Self, SecurityError> {
        let mu = config.source.mean_photon_number;
        let f = config.protocol.ec_inefficiency;
        let threshold = security_threshold(mu, f)?;
        let estimate = s.sample.map(|q| q.estimate);
        let sampled_out = s.sample.map_or(0, |q| q.sampled as u64);
        let mismatches = s.sample.map_or(0, |q| q.mismatches as u64);
        let measured_qber =
            (s.sifted_bits > 0).then(|| (mismatches + s.flips) as f64 / s.sifted_bits as f64);
        let duration_s = s.slot_count as f64 * config.source.pulse_interval_s();
        Ok(RunReport {
            config_digest: config.digest(),
            seed,
            slots: s.slot_count,
            session_id: s.session_id,
            analytic: rate_point(config)?,
            measured: Measured {
                sifted_bits: s.sifted_bits,
                sifted_rate_hz: if duration_s > 0.0 {
                    s.sifted_bits as f64 / duration_s
                } else {
                    0.0
                },
                qber: measured_qber,
            },
            estimated_qber: estimate,
            security_threshold: threshold,
            below_threshold: estimate.map(|e| e < threshold),
            tau: s.tau,
            keys: KeyLengths {
                sifted: s.sifted_bits,
                sampled_out,
                reconciled: s.reconciled_bits,
                final_bits: s.final_bits,
            },
            leakage: Leakage {
                reconciliation_parities: s.parities,
                verification_bits: VERIFY_TAG_BITS as u64,
                total_disclosed: s.parities + VERIFY_TAG_BITS as u64,
                margin_bits: config.protocol.pa_margin_bits,
                analytic_ec_bits: estimate.map(|e| f * binary_entropy(e) * s.reconciled_bits as f64),
            },
            reconciliation: ReconciliationSummary {
                passes: s.passes,
                flips: s.flips,
                converged: s.converged,
            },
            verified: s.verified,
            final_key_sha256: key_digest(final_key),
            wall_clock_s: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// SHA-256 of the key file encoding.
pub fn key_digest(key: &Bits) -> String {
    hex::encode(Sha256::digest(write_key(key)))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: RunReport,
    pub sender_key: KeyMaterial,
    pub receiver_key: KeyMaterial,
    pub transcript: ReconciliationTranscript,
}

/// Simulates `slots` pulses and distills both parties' keys in-process.
pub fn run_pipeline(
    config: &ExperimentConfig,
    seed: u64,
    slots: u64,
    opts: &DistillOptions,
) -> Result<PipelineOutput, PipelineError> {
    let (record, log) = simulate_session(config, seed, slots);
    distill_session(config, &record, &log, opts)
}

pub fn distill_session(
    config: &ExperimentConfig,
    record: &SenderRecord,
    log: &DetectionLog,
    opts: &DistillOptions,
) -> Result<PipelineOutput, PipelineError> {
    let seeds = ClassicalSeeds::from_classical(classical_seed(record.seed));
    let (a, b) = sift(record, log)?;
    let sifted_bits = a.len() as u64;
    let (sample, a, b) = if a.is_empty() {
        (None, a, b)
    } else {
        let (q, a, b) = estimate_qber(&a, &b, opts.sample_fraction, seeds.sample)?;
        (Some(q), a, b)
    };
    let params = CascadeParams {
        min_passes: opts.min_passes,
        max_passes: opts.max_passes,
        seed: seeds.cascade,
    };
    let hint = qber_hint(sample.map(|q| q.estimate));
    let rec = match reconcile(&a, &b, hint, &params) {
        Ok(r) => r,
        Err(ReconcileError::NonConvergence { partial, .. }) => *partial,
        Err(e) => return Err(PipelineError::Reconcile(describe(e))),
    };
    let parities = rec.transcript.total_parities;
    let mut a = KeyMaterial {
        stage: Stage::Reconciled,
        leakage_bits: a.leakage_bits + parities,
        ..a
    };
    let mut b = rec.key;
    let verified = verify(&mut a, &mut b, seeds.verify);
    let (tau, m) = plan_final_length(
        config,
        b.len() as u64,
        sample.map(|q| q.estimate),
        b.leakage_bits,
        verified,
    )?;
    let a = privacy_amplify(&a, m, seeds.privacy)?;
    let b = privacy_amplify(&b, m, seeds.privacy)?;

    let summary = DistillSummary {
        slot_count: log.slot_count,
        session_id: log.session_id,
        sifted_bits,
        sample,
        reconciled_bits: rec.transcript.key_len as u64,
        parities,
        passes: rec.transcript.rounds.len() as u32,
        flips: rec.transcript.flip_count() as u64,
        converged: rec.transcript.converged,
        verified,
        tau,
        final_bits: m,
    };
    let report = RunReport::new(config, Some(record.seed), &summary, &b.bits)?;
    Ok(PipelineOutput {
        report,
        sender_key: a,
        receiver_key: b,
        transcript: rec.transcript,
    })
}

fn describe(e: ReconcileError<Infallible>) -> String {
    e.to_string()
}
