//! Deterministic single-process simulator for decentralized momentum SGD
//! with compressed, event-triggered gossip (SQuARM-SGD).
//!
//! The crate is organized around the pieces of one training round:
//!
//! * [`topology`] builds doubly-stochastic mixing matrices and their spectral
//!   quantities.
//! * [`compress`] holds the compression operators and their bit costs.
//! * [`objective`] provides per-node objectives and gradient oracles.
//! * [`schedule`] evaluates learning-rate, consensus step-size and threshold
//!   formulas.
//! * [`node`] implements the per-worker state transitions.
//! * [`engine`] drives a full run and records metrics and diagnostics.
//! * [`presets`] and [`config`] describe runs as flat key/value maps.
//! * [`verify`] bundles the invariant suites exposed by the CLI.
//!
//! Node-local work (gradient sampling, local steps, trigger tests, encoding)
//! runs on rayon when the `parallel` feature is enabled. Results are
//! bit-identical to the sequential path because every node owns a private
//! random stream and all cross-node reductions run in fixed node order.

pub mod compress;
pub mod config;
pub mod engine;
mod error;
pub mod node;
pub mod objective;
pub mod par;
pub mod presets;
pub mod rng;
pub mod schedule;
pub mod topology;
pub mod verify;

pub use error::{Error, Result};

/// Squared Euclidean norm.
pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
