//! Differential-phase-shift quantum key distribution toolkit.
//!
//! - [`params`]: experiment configuration and derived per-slot probabilities
//! - [`security`]: analytic key rates, security threshold and distance sweeps
//! - [`sim`]: slot-level Monte Carlo of the optical link and detectors
//! - [`distill`]: sifting, QBER estimation, reconciliation, verification and
//!   privacy amplification
//! - [`pipeline`]: the full in-process distillation run and its report
//! - [`frame`], [`session`]: the two-party session over a framed byte stream

pub mod distill;
pub mod frame;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod security;
pub mod session;
pub mod sim;

pub use params::{load_config, ExperimentConfig};
