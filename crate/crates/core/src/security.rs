//! Secure-key-rate analysis for DPS-QKD under individual attacks.
//!
//! The collision-probability bound combines an optimal individual measurement
//! with photon-number splitting, which caps Eve's information at `2 mu`.
//! Privacy amplification keeps `tau = -(1 - 2 mu) log2 P_c0(e)` of the sifted
//! bits, and error correction costs `f(e) h2(e)`. The sifted rate follows the
//! free-running detector model with a paralyzable per-detector dead time.

use serde::Serialize;
use thiserror::Error;

use crate::params::{channel_transmittance, ExperimentConfig};

#[derive(Debug, Error, PartialEq)]
pub enum SecurityError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("no security threshold: the key fraction is not positive at e -> 0")]
    NoRoot,
}

/// QBER at which the single-bit collision probability peaks (`d P_c0/de = 0`).
///
/// Beyond it the bound stops being monotone in `e` and no key is extracted.
pub const COLLISION_PEAK_QBER: f64 = 3.0 / 19.0;

fn check_qber(e: f64) -> Result<(), SecurityError> {
    if (0.0..=0.5).contains(&e) {
        Ok(())
    } else {
        Err(SecurityError::Domain {
            name: "qber",
            value: e,
            domain: "[0, 0.5]",
        })
    }
}

fn check_mu(mu: f64) -> Result<(), SecurityError> {
    if (0.0..0.5).contains(&mu) {
        Ok(())
    } else {
        Err(SecurityError::Domain {
            name: "mean_photon_number",
            value: mu,
            domain: "[0, 0.5)",
        })
    }
}

fn check_inefficiency(f: f64) -> Result<(), SecurityError> {
    if f >= 1.0 && f.is_finite() {
        Ok(())
    } else {
        Err(SecurityError::Domain {
            name: "ec_inefficiency",
            value: f,
            domain: "[1, inf)",
        })
    }
}

/// Collision probability of a single sifted bit under the optimal individual
/// measurement, `1 - e^2 - (1 - 6e)^2 / 2`, clamped to `[0, 1]`.
pub fn collision_prob_single(e: f64) -> Result<f64, SecurityError> {
    check_qber(e)?;
    let d = 1.0 - 6.0 * e;
    Ok((1.0 - e * e - d * d / 2.0).clamp(0.0, 1.0))
}

/// `log2` of the n-bit collision bound, `n (1 - 2 mu) log2 P_c0(e)`.
pub fn log2_collision_prob_n(e: f64, mu: f64, n: u64) -> Result<f64, SecurityError> {
    check_mu(mu)?;
    if n == 0 {
        return Err(SecurityError::Domain {
            name: "n",
            value: 0.0,
            domain: "[1, inf)",
        });
    }
    let pc0 = collision_prob_single(e)?;
    Ok(n as f64 * (1.0 - 2.0 * mu) * pc0.log2())
}

/// Upper bound on the collision probability of an n-bit sifted key under the
/// combined PNS and individual-measurement attack.
pub fn collision_prob_n(e: f64, mu: f64, n: u64) -> Result<f64, SecurityError> {
    Ok(log2_collision_prob_n(e, mu, n)?.exp2())
}

/// Compression factor `tau = -log2(P_C) / n`, which does not depend on `n`.
/// Clamped to `[0, 1]`.
pub fn compression_factor(e: f64, mu: f64) -> Result<f64, SecurityError> {
    check_mu(mu)?;
    let pc0 = collision_prob_single(e)?;
    Ok((-(1.0 - 2.0 * mu) * pc0.log2()).clamp(0.0, 1.0))
}

/// Binary Shannon entropy in bits, with `h2(0) = h2(1) = 0`.
pub fn binary_entropy(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        return 0.0;
    }
    -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
}

/// Secure bits per sifted bit before clamping: `tau(e, mu) - f h2(e)`.
pub fn secure_fraction(e: f64, mu: f64, f: f64) -> Result<f64, SecurityError> {
    check_inefficiency(f)?;
    Ok(compression_factor(e, mu)? - f * binary_entropy(e))
}

/// Secure key rate `R_sift * max(0, tau - f h2(e))`. Zero at and beyond the
/// collision-bound peak.
pub fn secure_rate(r_sift: f64, e: f64, mu: f64, f: f64) -> Result<f64, SecurityError> {
    if r_sift.is_nan() || r_sift < 0.0 {
        return Err(SecurityError::Domain {
            name: "sifted_rate_hz",
            value: r_sift,
            domain: "[0, inf)",
        });
    }
    let bracket = secure_fraction(e, mu, f)?;
    if e >= COLLISION_PEAK_QBER || bracket <= 0.0 {
        return Ok(0.0);
    }
    Ok(r_sift * bracket)
}

/// QBER at which the secure fraction reaches zero, by bisection.
///
/// The fraction is strictly decreasing on `(0, COLLISION_PEAK_QBER]`, so the
/// root there is unique. Returns the upper end of the final bracket, so that
/// [`secure_rate`] is already zero at the returned value.
pub fn security_threshold(mu: f64, f: f64) -> Result<f64, SecurityError> {
    const TOLERANCE: f64 = 1e-12;
    check_mu(mu)?;
    check_inefficiency(f)?;
    if secure_fraction(0.0, mu, f)? <= 0.0 {
        return Err(SecurityError::NoRoot);
    }
    let (mut lo, mut hi) = (0.0f64, COLLISION_PEAK_QBER);
    while hi - lo > TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if secure_fraction(mid, mu, f)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Eve's information fraction from photon-number splitting, `2 mu`.
pub fn pns_info_bound(mu: f64) -> f64 {
    2.0 * mu
}

/// Probability that an eavesdropper holding a phase-locked local oscillator
/// unambiguously learns the phase difference of two adjacent pulses.
pub fn usd_success_prob(mu: f64) -> f64 {
    -(-2.0 * mu).exp_m1()
}

fn raw_click_rate(config: &ExperimentConfig) -> f64 {
    config.source.clock_rate_hz
        * config.source.mean_photon_number
        * channel_transmittance(&config.channel)
        * config.effective_efficiency()
}

/// Sifted key rate of the free-running detector pair,
/// `nu mu T eta exp(-nu mu T eta t_d / 2)`.
///
/// Each detector carries half the clicks, hence the `/2` in the paralyzable
/// dead-time factor. Noise clicks are not included.
pub fn sifted_rate(config: &ExperimentConfig) -> f64 {
    let x = raw_click_rate(config);
    x * (-x * config.dead_time_s() / 2.0).exp()
}

/// Rate of all logged detection events, signal and noise, under the same
/// linear click model and dead-time factor as [`sifted_rate`].
///
/// This is the event rate that [`qber_model`]'s denominator describes, and
/// what a simulated detection log should reproduce.
pub fn detection_rate(config: &ExperimentConfig) -> f64 {
    let x = raw_click_rate(config)
        + config.source.clock_rate_hz * config.dark_probability_per_slot();
    x * (-x * config.dead_time_s() / 2.0).exp()
}

/// Expected QBER: interferometer errors on signal clicks plus random noise
/// clicks, `(e_base p_sig + p_dark / 2) / (p_sig + p_dark)`.
pub fn qber_model(config: &ExperimentConfig) -> f64 {
    let p_sig = config.source.mean_photon_number
        * channel_transmittance(&config.channel)
        * config.effective_efficiency();
    let p_dark = config.dark_probability_per_slot();
    if p_sig + p_dark == 0.0 {
        return 0.5;
    }
    (config.protocol.baseline_error * p_sig + 0.5 * p_dark) / (p_sig + p_dark)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub distance_km: f64,
    pub sifted_rate_hz: f64,
    pub qber: f64,
    #[serde(rename = "tau")]
    pub compression_factor: f64,
    pub secure_rate_hz: f64,
    pub secure: bool,
    pub usd_success_prob: f64,
}

/// Analytic operating point of a configuration at its configured length.
pub fn rate_point(config: &ExperimentConfig) -> Result<RatePoint, SecurityError> {
    let mu = config.source.mean_photon_number;
    let f = config.protocol.ec_inefficiency;
    let r_sift = sifted_rate(config);
    let e = qber_model(config);
    let tau = compression_factor(e, mu)?;
    let r_sec = secure_rate(r_sift, e, mu, f)?;
    Ok(RatePoint {
        distance_km: config.channel.length_km,
        sifted_rate_hz: r_sift,
        qber: e,
        compression_factor: tau,
        secure_rate_hz: r_sec,
        secure: r_sec > 0.0,
        usd_success_prob: usd_success_prob(mu),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub config_digest: String,
    pub mean_photon_number: f64,
    pub ec_inefficiency: f64,
    pub security_threshold: f64,
    pub points: Vec<RatePoint>,
}

pub const SWEEP_CSV_HEADER: &str = "distance_km,sifted_rate_hz,qber,tau,secure_rate_hz,secure";

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.points.len() + 1));
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.distance_km,
                p.sifted_rate_hz,
                p.qber,
                p.compression_factor,
                p.secure_rate_hz,
                p.secure
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep table serializes")
    }

    /// First distance at which no secure key remains.
    pub fn cutoff_km(&self) -> Option<f64> {
        self.points.iter().find(|p| !p.secure).map(|p| p.distance_km)
    }
}

/// Evaluates the analytic model over `start_km..=end_km` in steps of `step_km`.
pub fn sweep_distance(
    config: &ExperimentConfig,
    start_km: f64,
    end_km: f64,
    step_km: f64,
) -> Result<SweepTable, SecurityError> {
    if !(start_km >= 0.0 && end_km >= start_km) {
        return Err(SecurityError::Domain {
            name: "sweep range",
            value: end_km - start_km,
            domain: "0 <= start <= end",
        });
    }
    if step_km.is_nan() || step_km <= 0.0 {
        return Err(SecurityError::Domain {
            name: "step_km",
            value: step_km,
            domain: "(0, inf)",
        });
    }
    let count = ((end_km - start_km) / step_km + 1e-9).floor() as usize + 1;
    let points = (0..count)
        .map(|i| rate_point(&config.with_length_km(start_km + i as f64 * step_km)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepTable {
        config_digest: config.digest(),
        mean_photon_number: config.source.mean_photon_number,
        ec_inefficiency: config.protocol.ec_inefficiency,
        security_threshold: security_threshold(
            config.source.mean_photon_number,
            config.protocol.ec_inefficiency,
        )?,
        points,
    })
}
