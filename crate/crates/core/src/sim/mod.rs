//! Slot-level Monte Carlo of the DPS link.
//!
//! The sender draws a random phase (0 or pi) per pulse. A click in slot `i`
//! comes from interference of pulses `i - 1` and `i`: with phase difference 0
//! it goes to detector 0, with pi to detector 1, and the interferometer
//! misroutes it with probability `baseline_error`. Each detector also fires
//! noise clicks. Signal clicks carry Gaussian timing jitter and are kept only
//! inside the gate window; a paralyzable dead time then thins the stream and
//! at most one event is logged per slot.
//!
//! Clicks are rare, so each click source is sampled by geometric skipping
//! over the slots instead of one Bernoulli trial per slot.

mod eventfile;

pub use eventfile::{
    read_detection_log, read_sender_record, write_detection_log, write_sender_record,
    EVENT_FILE_MAGIC, EVENT_FILE_VERSION,
};

use bitvec::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use thiserror::Error;

use crate::params::{
    channel_transmittance, dark_count_per_window, effective_jitter_sigma_s, DeadTimeScope,
    ExperimentConfig,
};
use crate::rng::{derive_seed, stream, SessionRng};

/// Packed bit string used for phase records and keys.
pub type Bits = BitVec<u64, Lsb0>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("events are not sorted by slot index (slot {slot} follows {previous})")]
    UnsortedInput { previous: u64, slot: u64 },
    #[error("session mismatch: record {record} vs log {log}")]
    SessionMismatch { record: u64, log: u64 },
    #[error("event at slot {slot} is outside the record of {slot_count} slots")]
    SlotOutOfRange { slot: u64, slot_count: u64 },
    #[error("event file: {0}")]
    EventFile(String),
}

/// The sender's phase per pulse slot; bit 1 means phase pi.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SenderRecord {
    pub phases: Bits,
    pub session_id: u64,
    pub seed: u64,
}

impl SenderRecord {
    /// Phase difference between pulse `slot - 1` and pulse `slot`.
    pub fn phase_difference(&self, slot: u64) -> Option<bool> {
        let i = usize::try_from(slot).ok()?;
        if i == 0 || i >= self.phases.len() {
            return None;
        }
        Some(self.phases[i] ^ self.phases[i - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    /// Slot of the later of the two interfering pulses; always at least 1.
    pub slot_index: u64,
    pub detector_id: u8,
    /// Arrival time relative to the slot centre, in picoseconds.
    pub time_offset_ps: i32,
}

impl DetectionEvent {
    pub fn time_offset_s(&self) -> f64 {
        f64::from(self.time_offset_ps) * 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionLog {
    pub events: Vec<DetectionEvent>,
    pub session_id: u64,
    pub slot_count: u64,
}

pub fn session_id_for(seed: u64) -> u64 {
    derive_seed(seed, "session-id")
}

/// Drops events that fall within the dead time of an earlier click.
///
/// The model is paralyzable: every click restarts the dead time, including
/// clicks that are themselves dropped. For a Poisson stream of rate `r` per
/// detector this keeps a fraction `exp(-r t_d)`. Wall time is
/// `slot_index * pulse_interval_s`. A zero dead time returns the input.
pub fn apply_dead_time(
    events: &[DetectionEvent],
    dead_time_s: f64,
    pulse_interval_s: f64,
    scope: DeadTimeScope,
) -> Result<Vec<DetectionEvent>, SimError> {
    if let Some(w) = events.windows(2).find(|w| w[1].slot_index < w[0].slot_index) {
        return Err(SimError::UnsortedInput {
            previous: w[0].slot_index,
            slot: w[1].slot_index,
        });
    }
    if dead_time_s <= 0.0 {
        return Ok(events.to_vec());
    }
    let dead_slots = dead_time_s / pulse_interval_s;
    let mut last: [Option<u64>; 2] = [None, None];
    let mut kept = Vec::with_capacity(events.len());
    for ev in events {
        let channel = match scope {
            DeadTimeScope::PerDetector => usize::from(ev.detector_id & 1),
            DeadTimeScope::System => 0,
        };
        let live = match last[channel] {
            Some(prev) => (ev.slot_index - prev) as f64 > dead_slots,
            None => true,
        };
        last[channel] = Some(ev.slot_index);
        if live {
            kept.push(*ev);
        }
    }
    Ok(kept)
}

fn random_phases(seed: u64, n_slots: usize) -> Bits {
    let mut rng = stream(seed, "phases");
    let words: Vec<u64> = (0..n_slots.div_ceil(64)).map(|_| rng.random()).collect();
    let mut phases = Bits::from_vec(words);
    phases.truncate(n_slots);
    phases
}

/// Slots `1..n_slots` at which a Bernoulli(p) source fires, by geometric skipping.
struct SkipSampler {
    rng: SessionRng,
    gap: Option<Geometric>,
    next: u64,
}

impl SkipSampler {
    fn new(rng: SessionRng, p: f64) -> Self {
        let gap = (p > 0.0).then(|| Geometric::new(p.min(1.0)).expect("p in (0, 1]"));
        let mut s = SkipSampler { rng, gap, next: 0 };
        s.advance();
        s
    }

    fn advance(&mut self) {
        self.next = match &self.gap {
            Some(g) => self.next.saturating_add(1).saturating_add(g.sample(&mut self.rng)),
            None => u64::MAX,
        };
    }
}

fn offset_to_ps(offset_s: f64) -> i32 {
    (offset_s * 1e12).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32
}

fn in_gate(offset_ps: i32, window_s: f64) -> bool {
    f64::from(offset_ps).abs() * 1e-12 <= window_s / 2.0
}

/// Runs one session of `n_slots` pulses. Fully determined by `(config, seed, n_slots)`.
pub fn simulate_session(
    config: &ExperimentConfig,
    seed: u64,
    n_slots: u64,
) -> (SenderRecord, DetectionLog) {
    let session_id = session_id_for(seed);
    let n = usize::try_from(n_slots).expect("slot count fits in memory");
    let phases = random_phases(seed, n);
    let record = SenderRecord {
        phases,
        session_id,
        seed,
    };

    let mu_t = config.source.mean_photon_number * channel_transmittance(&config.channel);
    let dets = config.detectors();
    // Per-detector probability that a photon arriving at it clicks.
    let p_click = dets.map(|d| -(-mu_t * d.quantum_efficiency).exp_m1());
    let p_max = p_click[0].max(p_click[1]);
    let sigma = dets.map(effective_jitter_sigma_s);
    let e_base = config.protocol.baseline_error;

    // (slot, detector, offset) of every click that lands inside the gate.
    let mut clicks: Vec<DetectionEvent> = Vec::new();

    let mut signal = SkipSampler::new(stream(seed, "signal"), p_max);
    while signal.next < n_slots {
        let slot = signal.next;
        let rng = &mut signal.rng;
        let diff = record.phase_difference(slot).expect("slot in range");
        let misrouted = rng.random_bool(e_base);
        let det = usize::from(diff ^ misrouted);
        let accept = p_click[det] / p_max;
        if accept >= 1.0 || rng.random_bool(accept) {
            let offset = if sigma[det] > 0.0 {
                Normal::new(0.0, sigma[det])
                    .expect("finite sigma")
                    .sample(rng)
            } else {
                0.0
            };
            let ps = offset_to_ps(offset);
            if in_gate(ps, dets[det].window_s) {
                clicks.push(DetectionEvent {
                    slot_index: slot,
                    detector_id: det as u8,
                    time_offset_ps: ps,
                });
            }
        }
        signal.advance();
    }

    for (det, label) in [(0usize, "dark0"), (1usize, "dark1")] {
        let window = dets[det].window_s;
        let mut dark = SkipSampler::new(stream(seed, label), dark_count_per_window(dets[det]));
        while dark.next < n_slots {
            let offset = dark.rng.random_range(-0.5..=0.5) * window;
            let mut ps = offset_to_ps(offset);
            if !in_gate(ps, window) {
                ps -= ps.signum();
            }
            clicks.push(DetectionEvent {
                slot_index: dark.next,
                detector_id: det as u8,
                time_offset_ps: ps,
            });
            dark.advance();
        }
    }

    // One click per detector per slot: the earliest.
    clicks.sort_by_key(|e| (e.slot_index, e.detector_id, e.time_offset_ps));
    clicks.dedup_by_key(|e| (e.slot_index, e.detector_id));
    clicks.sort_by_key(|e| (e.slot_index, e.time_offset_ps, e.detector_id));

    let survivors = apply_dead_time(
        &clicks,
        config.dead_time_s(),
        config.source.pulse_interval_s(),
        config.dead_time_scope,
    )
    .expect("clicks are sorted");

    let mut events: Vec<DetectionEvent> = Vec::with_capacity(survivors.len());
    for ev in survivors {
        if events.last().is_some_and(|l| l.slot_index == ev.slot_index) {
            continue;
        }
        events.push(ev);
    }

    let log = DetectionLog {
        events,
        session_id,
        slot_count: n_slots,
    };
    (record, log)
}

/// Per-session statistics measured by comparing the log with the sender's
/// phases: sifted rate in bits/s and the fraction of wrong detector outcomes.
/// An empty log has QBER 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalRates {
    pub sifted_rate_hz: f64,
    pub qber: f64,
    pub events: u64,
    pub errors: u64,
}

pub fn empirical_rates(
    record: &SenderRecord,
    log: &DetectionLog,
    config: &ExperimentConfig,
) -> Result<EmpiricalRates, SimError> {
    if record.session_id != log.session_id {
        return Err(SimError::SessionMismatch {
            record: record.session_id,
            log: log.session_id,
        });
    }
    let mut errors = 0u64;
    for ev in &log.events {
        let diff = record
            .phase_difference(ev.slot_index)
            .ok_or(SimError::SlotOutOfRange {
                slot: ev.slot_index,
                slot_count: record.phases.len() as u64,
            })?;
        if u8::from(diff) != ev.detector_id {
            errors += 1;
        }
    }
    let events = log.events.len() as u64;
    let sifted_rate_hz = if log.slot_count == 0 {
        0.0
    } else {
        events as f64 * config.source.clock_rate_hz / log.slot_count as f64
    };
    let qber = if events == 0 {
        0.0
    } else {
        errors as f64 / events as f64
    };
    Ok(EmpiricalRates {
        sifted_rate_hz,
        qber,
        events,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::parse_config;
    use crate::security;

    const TEN_KM_CFG: &str = include_str!("../../../../configs/paper-10km.cfg");

    fn ten_km() -> ExperimentConfig {
        parse_config(TEN_KM_CFG).unwrap()
    }

    fn ev(slot: u64, det: u8) -> DetectionEvent {
        DetectionEvent {
            slot_index: slot,
            detector_id: det,
            time_offset_ps: 0,
        }
    }

    #[test]
    fn zero_slots_is_empty() {
        let (rec, log) = simulate_session(&ten_km(), 1, 0);
        assert!(rec.phases.is_empty());
        assert!(log.events.is_empty());
        let r = empirical_rates(&rec, &log, &ten_km()).unwrap();
        assert_eq!((r.sifted_rate_hz, r.qber), (0.0, 0.0));
    }

    #[test]
    fn identical_inputs_give_identical_sessions() {
        let c = ten_km().with_length_km(0.0);
        let a = simulate_session(&c, 99, 200_000);
        let b = simulate_session(&c, 99, 200_000);
        assert_eq!(a, b);
        let other = simulate_session(&c, 100, 200_000);
        assert_ne!(a.0.phases, other.0.phases);
    }

    #[test]
    fn phases_are_balanced() {
        let (rec, _) = simulate_session(&ten_km(), 5, 1_000_000);
        let ones = rec.phases.count_ones() as f64;
        // 3 sigma of Binomial(1e6, 1/2) is 1500
        assert!((ones - 500_000.0).abs() < 1500.0, "{ones}");
    }

    #[test]
    fn noise_only_gives_random_bits() {
        let mut c = ten_km();
        c.source.mean_photon_number = 0.0;
        c.detector0.dark_rate_hz = 1e7;
        c.detector1.dark_rate_hz = 1e7;
        let (rec, log) = simulate_session(&c, 3, 2_000_000);
        let r = empirical_rates(&rec, &log, &c).unwrap();
        assert!(r.events > 1000);
        let sigma = (0.25 / r.events as f64).sqrt();
        assert!((r.qber - 0.5).abs() < 3.0 * sigma, "{} vs 3 sigma {}", r.qber, sigma);
    }

    #[test]
    fn ideal_channel_has_no_errors() {
        let mut c = ten_km().with_length_km(0.0);
        c.protocol.baseline_error = 0.0;
        c.detector0.dark_rate_hz = 0.0;
        c.detector1.dark_rate_hz = 0.0;
        for seed in 0..5 {
            let (rec, log) = simulate_session(&c, seed, 300_000);
            let r = empirical_rates(&rec, &log, &c).unwrap();
            assert!(r.events > 100);
            assert_eq!(r.errors, 0);
        }
    }

    #[test]
    fn log_invariants_hold() {
        let mut c = ten_km().with_length_km(0.0);
        c.detector0.dead_time_s = 20e-9;
        c.detector1.dead_time_s = 20e-9;
        c.detector0.dark_rate_hz = 3e6;
        let (_, log) = simulate_session(&c, 11, 2_000_000);
        assert!(!log.events.is_empty());
        let dead_slots = 20e-9 / c.source.pulse_interval_s();
        let mut last = [None::<u64>; 2];
        for w in log.events.windows(2) {
            assert!(w[1].slot_index > w[0].slot_index);
        }
        for e in &log.events {
            assert!(e.slot_index >= 1);
            assert!(e.time_offset_s().abs() <= c.detector0.window_s / 2.0);
            if let Some(prev) = last[e.detector_id as usize] {
                assert!((e.slot_index - prev) as f64 > dead_slots);
            }
            last[e.detector_id as usize] = Some(e.slot_index);
        }
    }

    #[test]
    fn ten_km_event_count_matches_sifted_rate() {
        let c = ten_km();
        let n = 10_000_000u64;
        let (_, log) = simulate_session(&c, 2024, n);
        let expected = security::sifted_rate(&c) * n as f64 / c.source.clock_rate_hz;
        let got = log.events.len() as f64;
        assert!(
            (got - expected).abs() < 3.0 * expected.sqrt(),
            "{got} vs {expected} +- {}",
            3.0 * expected.sqrt()
        );
    }

    #[test]
    fn dead_time_examples() {
        let input = vec![ev(1, 0), ev(2, 0), ev(2, 1), ev(40, 1)];
        let same = apply_dead_time(&input, 0.0, 1.0, DeadTimeScope::PerDetector).unwrap();
        assert_eq!(same, input);

        let pair = [ev(5, 1), ev(6, 1)];
        let out = apply_dead_time(&pair, 10.0, 1.0, DeadTimeScope::PerDetector).unwrap();
        assert_eq!(out, vec![ev(5, 1)]);

        // other detector is unaffected unless the scope is system-wide
        let out = apply_dead_time(&input, 10.0, 1.0, DeadTimeScope::PerDetector).unwrap();
        assert_eq!(out, vec![ev(1, 0), ev(2, 1), ev(40, 1)]);
        let out = apply_dead_time(&input, 10.0, 1.0, DeadTimeScope::System).unwrap();
        assert_eq!(out, vec![ev(1, 0), ev(40, 1)]);

        // paralyzable: a dropped click still extends the dead time
        let chain = [ev(0, 0), ev(8, 0), ev(16, 0), ev(30, 0)];
        let out = apply_dead_time(&chain, 10.0, 1.0, DeadTimeScope::PerDetector).unwrap();
        assert_eq!(out, vec![ev(0, 0), ev(30, 0)]);

        let unsorted = [ev(3, 0), ev(2, 0)];
        assert_eq!(
            apply_dead_time(&unsorted, 1.0, 1.0, DeadTimeScope::PerDetector),
            Err(SimError::UnsortedInput { previous: 3, slot: 2 })
        );
    }

    #[test]
    fn hand_traced_session() {
        let mut phases = Bits::new();
        phases.extend([false, true, true, false]);
        let rec = SenderRecord {
            phases,
            session_id: 1,
            seed: 0,
        };
        let log = DetectionLog {
            events: vec![ev(2, 0)],
            session_id: 1,
            slot_count: 4,
        };
        let c = ten_km();
        let r = empirical_rates(&rec, &log, &c).unwrap();
        assert_eq!(r.events, 1);
        assert_eq!(r.qber, 0.0);
        assert_eq!(r.sifted_rate_hz, c.source.clock_rate_hz / 4.0);

        let other = DetectionLog { session_id: 2, ..log.clone() };
        assert!(matches!(empirical_rates(&rec, &other, &c), Err(SimError::SessionMismatch { .. })));
        let outside = DetectionLog { events: vec![ev(4, 0)], ..log };
        assert!(matches!(empirical_rates(&rec, &outside, &c), Err(SimError::SlotOutOfRange { .. })));
    }
}
