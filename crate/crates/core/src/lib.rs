//! Simulation and statistical verification of energy-based stochastic
//! state reduction.
//!
//! The crate integrates the nonlinear reduction equation on a finite
//! dimensional Hilbert space, evaluates its closed-form solution via a change
//! of measure, solves the associated dephasing master equation, and checks the
//! martingale laws of the energy process against Monte Carlo ensembles.

pub mod ensemble;
pub mod error;
pub mod fixture;
pub mod girsanov;
pub mod hilbert;
pub mod io;
pub mod lindblad;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
