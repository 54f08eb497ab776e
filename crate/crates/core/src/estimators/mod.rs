//! Least-squares multilateration estimators.
//!
//! All estimators take microphone positions in an arbitrary frame. Spherical
//! and hyperbolic estimators work internally relative to the reference
//! microphone; the conic estimator works relative to the array barycenter.

mod conic;
mod hyperbolic;
mod lstsq;
mod spherical;

pub use conic::{build_conic_system, conic_ls, ConicSystem};
pub use hyperbolic::{hyperbolic_ls, HyperbolicOptions, NoiseCovariance};
pub use spherical::{build_spherical_system, srd_ls, usrd_ls, SphericalSystem};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Condition number of a Gram matrix above which it is treated as singular.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

fn check_mics(mics: &[Point], rd_mic_count: usize) -> Result<()> {
    if mics.len() != rd_mic_count {
        return Err(Error::DimensionMismatch(format!(
            "{} microphone positions for {} range-difference channels",
            mics.len(),
            rd_mic_count
        )));
    }
    crate::geometry::validate_mics(mics)
}

/// Condition number of `AᵀA` from the singular values of `A`.
fn gram_condition(svd: &lstsq::JacobiSvd) -> f64 {
    let sv = svd.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        (max / min).powi(2)
    }
}
