//! TDOA averaging: projection of a full pairwise RD matrix onto the set of
//! self-consistent matrices `d[m][m'] = D[m'] - D[m]`.
//!
//! Fitting `D` (up to a common offset) to the upper triangle in the LS sense
//! gives `D[j] = (1/M) Σ_k d[k][j]`, hence the averaged entries
//!
//! ```text
//! d'[m][m'] = (1/M) Σ_k (d[m][k] + d[k][m'])
//! ```
//!
//! which is the orthogonal projection of the vectorized upper triangle onto
//! the range of the first-order difference operator.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::geometry::RdMatrix;

pub fn tdoa_average(rd: &RdMatrix) -> RdMatrix {
    let m = rd.mic_count();
    if m == 0 {
        return rd.clone();
    }
    // Column means of d give the fitted distances up to a common offset.
    let values = rd.values();
    let fitted: Vec<f64> = (0..m)
        .map(|j| values.column(j).iter().sum::<f64>() / m as f64)
        .collect();
    RdMatrix::from_upper(m, |i, j| fitted[j] - fitted[i])
}

/// Validating entry point for raw matrices: rejects input that is not
/// antisymmetric to within 1e-9 m.
pub fn tdoa_average_values(values: DMatrix<f64>) -> Result<RdMatrix> {
    Ok(tdoa_average(&RdMatrix::new(values)?))
}
