//! Conic (plane-intersection) least squares over every microphone triplet.

use nalgebra::{DMatrix, DVector};

use super::lstsq::JacobiSvd;
use super::{check_mics, RANK_TOLERANCE};
use crate::error::{Error, Result};
use crate::geometry::{barycenter, Diagnostics, LocalizationResult, Point, RdMatrix, Status};

/// Rows below this norm carry no plane normal and are dropped.
const MIN_ROW_NORM: f64 = 1e-12;

/// Stacked plane equations `Ψ r = ψ`, one row per microphone triplet
/// `p < q < r`, in coordinates centred on `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicSystem {
    /// Rows `[A, B, C]`.
    pub psi_matrix: DMatrix<f64>,
    /// Right-hand sides `F`.
    pub psi_rhs: DVector<f64>,
    /// Triplets backing the rows, in row order.
    pub triplets: Vec<[usize; 3]>,
    /// Triplets excluded for a vanishing normal.
    pub dropped: Vec<[usize; 3]>,
    pub normalized: bool,
    pub origin: Point,
}

impl ConicSystem {
    /// Per-row residual `[A, B, C]·r - F` for a point in the caller's frame.
    pub fn plane_residuals(&self, point: &Point) -> DVector<f64> {
        let local = point - self.origin;
        &self.psi_matrix * DVector::from_column_slice(local.as_slice()) - &self.psi_rhs
    }
}

pub fn build_conic_system(rd: &RdMatrix, mics: &[Point], normalize: bool) -> Result<ConicSystem> {
    let m = rd.mic_count();
    check_mics(mics, m)?;
    if m < 4 {
        return Err(Error::InsufficientMicrophones {
            method: "conic",
            needed: 4,
            got: m,
        });
    }
    let origin = barycenter(mics);
    let local: Vec<Point> = mics.iter().map(|p| p - origin).collect();
    let sq: Vec<f64> = local.iter().map(|p| p.norm_squared()).collect();

    let mut rows: Vec<[f64; 4]> = Vec::with_capacity(m * (m - 1) * (m - 2) / 6);
    let mut triplets = Vec::new();
    let mut dropped = Vec::new();
    for p in 0..m {
        for q in p + 1..m {
            for r in q + 1..m {
                let (d_pq, d_qr, d_rp) = (rd.get(p, q), rd.get(q, r), rd.get(r, p));
                let normal = local[p] * d_qr + local[q] * d_rp + local[r] * d_pq;
                let f = 0.5 * (d_pq * d_qr * d_rp + d_qr * sq[p] + d_rp * sq[q] + d_pq * sq[r]);
                let norm = normal.norm();
                if norm < MIN_ROW_NORM {
                    dropped.push([p, q, r]);
                    continue;
                }
                let scale = if normalize { 1.0 / norm } else { 1.0 };
                rows.push([
                    normal.x * scale,
                    normal.y * scale,
                    normal.z * scale,
                    f * scale,
                ]);
                triplets.push([p, q, r]);
            }
        }
    }
    let psi_matrix = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let psi_rhs = DVector::from_fn(rows.len(), |i, _| rows[i][3]);
    Ok(ConicSystem {
        psi_matrix,
        psi_rhs,
        triplets,
        dropped,
        normalized: normalize,
        origin,
    })
}

/// Solves the stacked plane system with the Moore-Penrose pseudoinverse.
/// Needs four non-coplanar microphones and the full pairwise RD set.
pub fn conic_ls(rd: &RdMatrix, mics: &[Point], normalize: bool) -> Result<LocalizationResult> {
    let system = build_conic_system(rd, mics, normalize)?;
    let diagnostics = Diagnostics {
        dropped_rows: system.dropped.len(),
        ..Diagnostics::default()
    };
    if system.psi_matrix.nrows() == 0 {
        // Minimum-norm solution of an empty system: the array barycenter.
        return Ok(LocalizationResult {
            position: system.origin,
            residual: 0.0,
            status: Status::Degenerate,
            diagnostics,
        });
    }
    let svd = JacobiSvd::new(&system.psi_matrix);
    let rank = svd.rank(RANK_TOLERANCE);
    let local = svd.solve(&system.psi_rhs, RANK_TOLERANCE);
    let residual = (&system.psi_matrix * &local - &system.psi_rhs).norm_squared();
    // Rank-deficient systems keep the minimum-norm position but are flagged.
    Ok(LocalizationResult {
        position: Point::new(local[0], local[1], local[2]) + system.origin,
        residual,
        status: if rank < 3 {
            Status::Degenerate
        } else {
            Status::ClosedForm
        },
        diagnostics,
    })
}
