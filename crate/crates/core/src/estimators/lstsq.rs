//! Singular value decomposition by one-sided Jacobi rotations, for the small
//! column counts the estimators need. Accurate to working precision even
//! when singular values nearly coincide.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 64;

/// `A = W Vᵀ` with orthogonal columns in `W`; `σⱼ = |wⱼ|`.
pub(crate) struct JacobiSvd {
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    singular_values: DVector<f64>,
}

impl JacobiSvd {
    pub(crate) fn new(a: &DMatrix<f64>) -> Self {
        let n = a.ncols();
        let mut w = a.clone();
        let mut v = DMatrix::identity(n, n);
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = w.column(p).norm_squared();
                    let beta = w.column(q).norm_squared();
                    let gamma = w.column(p).dot(&w.column(q));
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                    let c = 1.0 / t.hypot(1.0);
                    let s = c * t;
                    rotate(&mut w, p, q, c, s);
                    rotate(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                break;
            }
        }
        let singular_values = DVector::from_fn(n, |j, _| w.column(j).norm());
        Self {
            w,
            v,
            singular_values,
        }
    }

    pub(crate) fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    fn threshold(&self, relative: f64) -> f64 {
        relative * self.singular_values.max()
    }

    /// Number of singular values above `relative` times the largest.
    pub(crate) fn rank(&self, relative: f64) -> usize {
        let eps = self.threshold(relative);
        self.singular_values.iter().filter(|&&s| s > eps).count()
    }

    /// Minimum-norm least-squares solution of `A x = b`, discarding
    /// singular values at or below `relative` times the largest.
    pub(crate) fn solve(&self, b: &DVector<f64>, relative: f64) -> DVector<f64> {
        let eps = self.threshold(relative);
        let mut x = DVector::zeros(self.v.nrows());
        for (j, &s) in self.singular_values.iter().enumerate() {
            if s > eps {
                let coef = self.w.column(j).dot(b) / (s * s);
                x.axpy(coef, &self.v.column(j), 1.0);
            }
        }
        x
    }
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (a, b) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}
