//! Numerical laboratory for the two-scale expansion of parabolic and elliptic
//! equations with random and periodic coefficients.

pub mod error;
pub mod field;
pub mod io;
pub mod lattice;
pub mod corrector;
pub mod forward;
pub mod walk;
pub mod diagnostics;
pub mod runner;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
