//! Range-difference multilateration for distributed microphones.
//!
//! The crate covers the whole chain from recordings to a position estimate:
//! GCC-PHAT delay estimation ([`tdoa`]), TDOA averaging ([`denoise`]), the
//! least-squares estimators ([`estimators`]), synthetic data ([`simulate`])
//! and a Monte Carlo harness ([`bench`]).
//!
//! Range differences follow `d[m][m'] = D[m'] - D[m]`, where `D[m]` is the
//! distance from the source to microphone `m`.

pub mod bench;
pub mod denoise;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod simulate;
pub mod tdoa;

pub use error::{Error, Result};
