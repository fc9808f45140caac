//! Simulation of photon subtraction by chains of saturable three-level
//! superatom absorbers coupled unidirectionally to a single probe mode.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: rates, pulses and configurations (rates in 1/µs, times in µs);
//! * [`liouvillian`]: chain operators and the Lindblad generator;
//! * [`ode`]: adaptive Dormand–Prince integration with dense output;
//! * [`propagator`]: master-equation evolution, conditional propagation and
//!   Monte-Carlo wavefunction trajectories;
//! * [`observables`]: transmitted rate, subtracted photons, populations, g²;
//! * [`counting`]: Raman photon counting statistics;
//! * [`reduced`]: adiabatically eliminated rate model;
//! * [`detection`]: ion detection statistics and Mandel Q;
//! * [`fit`]: least-squares estimation of the absorber rates;
//! * [`harness`]: configuration files, sweeps and table output.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counting;
pub mod detection;
pub mod error;
pub mod fit;
pub mod harness;
pub mod liouvillian;
pub mod model;
pub mod observables;
pub mod ode;
pub mod propagator;
pub mod reduced;

pub use error::{Error, Result};
pub use model::{ChainConfig, ChainParams, PulseShape, PulseSpec, SolverOptions, SuperatomParams};
