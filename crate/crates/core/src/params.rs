//! Experiment parameters: source, channel, detectors and protocol settings.
//!
//! Configurations are flat `key = value` text files with `#` comments. All
//! quantities use SI base units (Hz, s, km, dB). Every field is validated on
//! load, and a loaded configuration serializes back to the same format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use statrs::function::erf::{erf, erf_inv};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("invalid value for `{field}`: {reason}")]
    InvariantViolation { field: &'static str, reason: String },
    #[error("cannot read config file: {0}")]
    Io(String),
}

impl ConfigError {
    fn violation(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::InvariantViolation {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    /// Pulse repetition rate in Hz.
    pub clock_rate_hz: f64,
    /// Mean photon number per pulse. Must stay below 0.5.
    pub mean_photon_number: f64,
}

impl SourceParams {
    pub fn pulse_interval_s(&self) -> f64 {
        1.0 / self.clock_rate_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    /// Fixed loss independent of length (connectors, interferometer insertion).
    pub excess_loss_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorModel {
    pub quantum_efficiency: f64,
    pub dark_rate_hz: f64,
    pub dead_time_s: f64,
    /// Full width at tenth maximum of the timing jitter.
    pub jitter_fwtm_s: f64,
    /// Width of the acceptance gate centred on each slot.
    pub window_s: f64,
    /// Measured fraction of signal clicks that land inside the gate. Replaces
    /// the Gaussian jitter estimate when set.
    pub window_acceptance_override: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeadTimeScope {
    /// Each detector is blinded only by its own clicks.
    #[default]
    PerDetector,
    /// A click on either detector blinds the whole receiver.
    System,
}

impl DeadTimeScope {
    fn as_str(self) -> &'static str {
        match self {
            DeadTimeScope::PerDetector => "per_detector",
            DeadTimeScope::System => "system",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolParams {
    /// Error contribution of the interferometer, independent of noise.
    pub baseline_error: f64,
    /// Error-correction inefficiency f(e): leakage relative to the Shannon limit.
    pub ec_inefficiency: f64,
    /// Bits withheld from the final key on top of measured leakage.
    pub pa_margin_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentConfig {
    pub source: SourceParams,
    pub channel: ChannelModel,
    pub detector0: DetectorModel,
    pub detector1: DetectorModel,
    pub protocol: ProtocolParams,
    pub dead_time_scope: DeadTimeScope,
}

const REQUIRED_KEYS: [&str; 15] = [
    "clock_rate_hz",
    "mean_photon_number",
    "length_km",
    "attenuation_db_per_km",
    "excess_loss_db",
    "qe_det0",
    "qe_det1",
    "dark_hz_det0",
    "dark_hz_det1",
    "dead_time_s",
    "jitter_fwtm_s",
    "window_s",
    "baseline_error",
    "ec_inefficiency",
    "pa_margin_bits",
];

const OPTIONAL_KEYS: [&str; 2] = ["window_acceptance_override", "dead_time_scope"];

/// Reads and validates a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

struct RawEntry<'a> {
    value: &'a str,
    line: usize,
}

/// Parses configuration text. Required keys are checked in their documented
/// order, so an empty input reports the first one.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut entries: BTreeMap<&str, RawEntry<'_>> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::ParseError {
            line,
            reason: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !REQUIRED_KEYS.contains(&key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(ConfigError::ParseError {
                line,
                reason: format!("unknown key `{key}`"),
            });
        }
        if value.is_empty() {
            return Err(ConfigError::ParseError {
                line,
                reason: format!("empty value for `{key}`"),
            });
        }
        if entries.insert(key, RawEntry { value, line }).is_some() {
            return Err(ConfigError::ParseError {
                line,
                reason: format!("duplicate key `{key}`"),
            });
        }
    }

    for key in REQUIRED_KEYS {
        if !entries.contains_key(key) {
            return Err(ConfigError::MissingKey(key));
        }
    }

    let num = |key: &'static str| -> Result<f64, ConfigError> {
        let entry = &entries[key];
        let v: f64 = entry.value.parse().map_err(|_| ConfigError::ParseError {
            line: entry.line,
            reason: format!("`{key}` is not a number: `{}`", entry.value),
        })?;
        if !v.is_finite() {
            return Err(ConfigError::violation(key, "must be finite"));
        }
        Ok(v)
    };

    let margin_entry = &entries["pa_margin_bits"];
    let pa_margin_bits: u64 = margin_entry
        .value
        .parse()
        .map_err(|_| ConfigError::ParseError {
            line: margin_entry.line,
            reason: format!(
                "`pa_margin_bits` is not a non-negative integer: `{}`",
                margin_entry.value
            ),
        })?;

    let window_acceptance_override = match entries.get("window_acceptance_override") {
        Some(_) => Some(num("window_acceptance_override")?),
        None => None,
    };
    let dead_time_scope = match entries.get("dead_time_scope") {
        None => DeadTimeScope::default(),
        Some(e) => match e.value {
            "per_detector" => DeadTimeScope::PerDetector,
            "system" => DeadTimeScope::System,
            other => {
                return Err(ConfigError::ParseError {
                    line: e.line,
                    reason: format!(
                        "`dead_time_scope` must be `per_detector` or `system`, found `{other}`"
                    ),
                })
            }
        },
    };

    let detector = |qe_key: &'static str, dark_key: &'static str| -> Result<DetectorModel, ConfigError> {
        Ok(DetectorModel {
            quantum_efficiency: num(qe_key)?,
            dark_rate_hz: num(dark_key)?,
            dead_time_s: num("dead_time_s")?,
            jitter_fwtm_s: num("jitter_fwtm_s")?,
            window_s: num("window_s")?,
            window_acceptance_override,
        })
    };

    let config = ExperimentConfig {
        source: SourceParams {
            clock_rate_hz: num("clock_rate_hz")?,
            mean_photon_number: num("mean_photon_number")?,
        },
        channel: ChannelModel {
            length_km: num("length_km")?,
            attenuation_db_per_km: num("attenuation_db_per_km")?,
            excess_loss_db: num("excess_loss_db")?,
        },
        detector0: detector("qe_det0", "dark_hz_det0")?,
        detector1: detector("qe_det1", "dark_hz_det1")?,
        protocol: ProtocolParams {
            baseline_error: num("baseline_error")?,
            ec_inefficiency: num("ec_inefficiency")?,
            pa_margin_bits,
        },
        dead_time_scope,
    };
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.source;
        if s.clock_rate_hz <= 0.0 {
            return Err(ConfigError::violation("clock_rate_hz", "must be > 0"));
        }
        if !(0.0..0.5).contains(&s.mean_photon_number) {
            return Err(ConfigError::violation(
                "mean_photon_number",
                "must satisfy 0 <= mu < 0.5 (security bound needs 1 - 2mu > 0)",
            ));
        }
        let c = &self.channel;
        for (field, v) in [
            ("length_km", c.length_km),
            ("attenuation_db_per_km", c.attenuation_db_per_km),
            ("excess_loss_db", c.excess_loss_db),
        ] {
            if v < 0.0 {
                return Err(ConfigError::violation(field, "must be >= 0"));
            }
        }
        for (det, qe_field, dark_field) in [
            (&self.detector0, "qe_det0", "dark_hz_det0"),
            (&self.detector1, "qe_det1", "dark_hz_det1"),
        ] {
            if !(0.0..=1.0).contains(&det.quantum_efficiency) {
                return Err(ConfigError::violation(qe_field, "must lie in [0, 1]"));
            }
            if det.dark_rate_hz < 0.0 {
                return Err(ConfigError::violation(dark_field, "must be >= 0"));
            }
            if det.dead_time_s < 0.0 {
                return Err(ConfigError::violation("dead_time_s", "must be >= 0"));
            }
            if det.jitter_fwtm_s < 0.0 {
                return Err(ConfigError::violation("jitter_fwtm_s", "must be >= 0"));
            }
            if det.window_s <= 0.0 {
                return Err(ConfigError::violation("window_s", "must be > 0"));
            }
            if let Some(a) = det.window_acceptance_override {
                if !(a > 0.0 && a <= 1.0) {
                    return Err(ConfigError::violation(
                        "window_acceptance_override",
                        "must lie in (0, 1]",
                    ));
                }
            }
        }
        let p = &self.protocol;
        if !(0.0..0.5).contains(&p.baseline_error) {
            return Err(ConfigError::violation("baseline_error", "must lie in [0, 0.5)"));
        }
        if p.ec_inefficiency < 1.0 {
            return Err(ConfigError::violation("ec_inefficiency", "must be >= 1"));
        }
        Ok(())
    }

    /// Canonical text form, readable by [`parse_config`].
    ///
    /// Detector fields shared by both detectors (dead time, jitter, window)
    /// are written once, taken from detector 0.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let d0 = &self.detector0;
        let d1 = &self.detector1;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("clock_rate_hz", fmt_f64(self.source.clock_rate_hz));
        kv("mean_photon_number", fmt_f64(self.source.mean_photon_number));
        kv("length_km", fmt_f64(self.channel.length_km));
        kv("attenuation_db_per_km", fmt_f64(self.channel.attenuation_db_per_km));
        kv("excess_loss_db", fmt_f64(self.channel.excess_loss_db));
        kv("qe_det0", fmt_f64(d0.quantum_efficiency));
        kv("qe_det1", fmt_f64(d1.quantum_efficiency));
        kv("dark_hz_det0", fmt_f64(d0.dark_rate_hz));
        kv("dark_hz_det1", fmt_f64(d1.dark_rate_hz));
        kv("dead_time_s", fmt_f64(d0.dead_time_s));
        kv("jitter_fwtm_s", fmt_f64(d0.jitter_fwtm_s));
        kv("window_s", fmt_f64(d0.window_s));
        kv("baseline_error", fmt_f64(self.protocol.baseline_error));
        kv("ec_inefficiency", fmt_f64(self.protocol.ec_inefficiency));
        kv("pa_margin_bits", self.protocol.pa_margin_bits.to_string());
        if let Some(a) = d0.window_acceptance_override {
            kv("window_acceptance_override", fmt_f64(a));
        }
        kv("dead_time_scope", self.dead_time_scope.as_str().to_string());
        out
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_string().as_bytes()))
    }

    /// Copy of this configuration with a different fiber length.
    pub fn with_length_km(&self, length_km: f64) -> Self {
        let mut c = *self;
        c.channel.length_km = length_km;
        c
    }

    pub fn detectors(&self) -> [&DetectorModel; 2] {
        [&self.detector0, &self.detector1]
    }

    /// Mean over both detectors of quantum efficiency times window acceptance.
    pub fn effective_efficiency(&self) -> f64 {
        self.detectors()
            .iter()
            .map(|d| d.quantum_efficiency * window_acceptance(d))
            .sum::<f64>()
            / 2.0
    }

    /// Probability of a noise click in one gated slot, summed over detectors.
    pub fn dark_probability_per_slot(&self) -> f64 {
        self.detectors().iter().map(|d| dark_count_per_window(d)).sum()
    }

    pub fn dead_time_s(&self) -> f64 {
        self.detector0.dead_time_s
    }
}

fn fmt_f64(v: f64) -> String {
    // Display gives the shortest string that parses back to the same value.
    format!("{v}")
}

/// Power transmittance of the fiber link, including excess loss.
pub fn channel_transmittance(channel: &ChannelModel) -> f64 {
    let loss_db = channel.attenuation_db_per_km * channel.length_km + channel.excess_loss_db;
    10f64.powf(-loss_db / 10.0)
}

/// Probability of a dark count inside one gate window.
pub fn dark_count_per_window(det: &DetectorModel) -> f64 {
    det.dark_rate_hz * det.window_s
}

/// FWTM of a Gaussian is `2 sqrt(2 ln 10) sigma`.
pub fn jitter_sigma_s(det: &DetectorModel) -> f64 {
    det.jitter_fwtm_s / (2.0 * (2.0 * std::f64::consts::LN_10).sqrt())
}

/// Fraction of signal clicks whose arrival time falls inside the gate.
pub fn window_acceptance(det: &DetectorModel) -> f64 {
    if let Some(a) = det.window_acceptance_override {
        return a;
    }
    let sigma = jitter_sigma_s(det);
    if sigma == 0.0 {
        return 1.0;
    }
    erf(det.window_s / 2.0 / (sigma * std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

/// Standard deviation of the Gaussian jitter model actually sampled by the
/// simulator: either derived from the FWTM or, with an override, the width
/// whose in-gate mass equals the override.
pub fn effective_jitter_sigma_s(det: &DetectorModel) -> f64 {
    match det.window_acceptance_override {
        None => jitter_sigma_s(det),
        Some(a) if a >= 1.0 => 0.0,
        Some(a) => det.window_s / 2.0 / (std::f64::consts::SQRT_2 * polished_erf_inv(a)),
    }
}

/// `erf_inv` refined by one Newton step; the series alone is good to ~1e-11.
fn polished_erf_inv(a: f64) -> f64 {
    let x = erf_inv(a);
    let slope = std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp();
    x - (erf(x) - a) / slope
}
