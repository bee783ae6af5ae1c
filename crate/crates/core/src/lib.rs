//! Structured parametric controller synthesis in linear fractional form.
//!
//! A controller `K★(s, ρ) = Fu(Fu(K, (1/s) I), ρ I)` is parametrized by one
//! static matrix `K`. Its entries are tuned to minimize the worst-case
//! closed-loop H∞ norm over a finite grid of parameter values, and the
//! resulting family can then be evaluated at any frozen `ρ`.
//!
//! The parameter is a frozen coefficient (a geometric dimension, a
//! performance knob), not a time-varying scheduling signal; no stability
//! guarantee is claimed for parameter trajectories.

pub mod cli;
pub mod error;
pub mod io;
pub mod lft;
pub mod matops;
pub mod models;
pub mod norms;
pub mod statespace;
pub mod synth;

pub use error::{Error, Result};

/// CSV number formatting: 17 significant digits in scientific notation.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}
