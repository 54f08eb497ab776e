//! Spherical least squares: the unconstrained closed form and the global
//! solution of the cone-constrained problem
//!
//! ```text
//! minimize |Φc - b|²  subject to  cᵀ diag(1, -1, -1, -1) c = 0,  c₁ ≥ 0
//! ```
//!
//! The constrained problem is a generalized trust-region subproblem. Its
//! global minimizer is `c(λ) = (ΦᵀΦ + λD)⁻¹Φᵀb` for the multiplier `λ` that
//! zeroes `φ(λ) = c(λ)ᵀDc(λ)` on the interval where `ΦᵀΦ + λD` is positive
//! definite. Diagonalizing `D` and `ΦᵀΦ` simultaneously turns `φ` into a sum
//! of rational terms, which makes the root search cheap and exact.

use nalgebra::{DMatrix, DVector, Matrix4, Matrix5, SymmetricEigen, Vector4, Vector5};

use super::lstsq::JacobiSvd;
use super::{check_mics, gram_condition, MAX_GRAM_CONDITION, RANK_TOLERANCE};
use crate::error::{Error, Result};
use crate::geometry::{
    Diagnostics, LocalizationResult, Point, RdVector, SphericalEstimate, Status,
};

/// The linear system `Φc ≈ b` in reference-centred coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalSystem {
    /// Rows `[d_m', r_m'ᵀ]`, one per non-reference microphone.
    pub phi: DMatrix<f64>,
    /// `b_m' = (|r_m'|² - d_m'²) / 2`.
    pub b: DVector<f64>,
    /// Position of the reference microphone in the caller's frame.
    pub origin: Point,
}

impl SphericalSystem {
    /// `|Φc - b|²`.
    pub fn cost(&self, c: &Vector4<f64>) -> f64 {
        (&self.phi * DVector::from_column_slice(c.as_slice()) - &self.b).norm_squared()
    }

    fn result(&self, c: Vector4<f64>, status: Status, iterations: usize) -> LocalizationResult {
        let local = Point::new(c[1], c[2], c[3]);
        LocalizationResult {
            position: local + self.origin,
            residual: self.cost(&c),
            status,
            diagnostics: Diagnostics {
                iterations,
                spherical: Some(SphericalEstimate {
                    range: c[0],
                    local_position: local,
                }),
                ..Diagnostics::default()
            },
        }
    }

    /// Newton steps on the stationarity conditions
    /// `Φᵀ(Φc - b) + λDc = 0`, `cᵀDc = 0`, with residuals taken from `Φ`
    /// directly. Recovers the accuracy lost in the pencil factorization.
    fn polish(&self, mut c: Vector4<f64>, mut lambda: f64) -> Vector4<f64> {
        const STEPS: usize = 3;
        let d = Vector4::new(1.0, -1.0, -1.0, -1.0);
        let gram = self.phi.transpose() * &self.phi;
        for _ in 0..STEPS {
            let cv = DVector::from_column_slice(c.as_slice());
            let grad = self.phi.transpose() * (&self.phi * &cv - &self.b);
            let dc = d.component_mul(&c);
            let mut f = Vector5::zeros();
            let mut jac = Matrix5::zeros();
            for i in 0..4 {
                f[i] = grad[i] + lambda * dc[i];
                for j in 0..4 {
                    jac[(i, j)] = gram[(i, j)];
                }
                jac[(i, i)] += lambda * d[i];
                jac[(i, 4)] = dc[i];
                jac[(4, i)] = 2.0 * dc[i];
            }
            f[4] = c.dot(&dc);
            let Some(step) = jac.lu().solve(&(-f)) else {
                break;
            };
            if !step.iter().all(|v| v.is_finite()) {
                break;
            }
            let delta = Vector4::new(step[0], step[1], step[2], step[3]);
            c += delta;
            lambda += step[4];
            if delta.norm() <= 4.0 * f64::EPSILON * c.norm() {
                break;
            }
        }
        c
    }

    fn degenerate(&self) -> LocalizationResult {
        LocalizationResult {
            position: Point::repeat(f64::NAN),
            residual: f64::NAN,
            status: Status::Degenerate,
            diagnostics: Diagnostics::default(),
        }
    }
}

pub fn build_spherical_system(rd: &RdVector, mics: &[Point]) -> Result<SphericalSystem> {
    check_mics(mics, rd.mic_count())?;
    let origin = mics[rd.reference()];
    let rows = rd.values().len();
    let mut phi = DMatrix::zeros(rows, 4);
    let mut b = DVector::zeros(rows);
    for (row, (j, &d)) in rd.mic_indices().zip(rd.values()).enumerate() {
        let r = mics[j] - origin;
        phi[(row, 0)] = d;
        phi[(row, 1)] = r.x;
        phi[(row, 2)] = r.y;
        phi[(row, 3)] = r.z;
        b[row] = 0.5 * (r.norm_squared() - d * d);
    }
    Ok(SphericalSystem { phi, b, origin })
}

/// Unconstrained spherical LS, `c* = (ΦᵀΦ)⁻¹Φᵀb`. Needs at least five
/// microphones in 3D.
pub fn usrd_ls(rd: &RdVector, mics: &[Point]) -> Result<LocalizationResult> {
    if rd.mic_count() < 5 {
        return Err(Error::InsufficientMicrophones {
            method: "usrd-ls",
            needed: 5,
            got: rd.mic_count(),
        });
    }
    let system = build_spherical_system(rd, mics)?;
    let svd = JacobiSvd::new(&system.phi);
    if gram_condition(&svd) > MAX_GRAM_CONDITION {
        return Ok(system.degenerate());
    }
    let c = svd.solve(&system.b, RANK_TOLERANCE);
    Ok(system.result(Vector4::new(c[0], c[1], c[2], c[3]), Status::ClosedForm, 0))
}

/// Constrained spherical LS, solved globally. Needs at least four
/// microphones.
pub fn srd_ls(rd: &RdVector, mics: &[Point]) -> Result<LocalizationResult> {
    if rd.mic_count() < 4 {
        return Err(Error::InsufficientMicrophones {
            method: "srd-ls",
            needed: 4,
            got: rd.mic_count(),
        });
    }
    let system = build_spherical_system(rd, mics)?;
    if gram_condition(&JacobiSvd::new(&system.phi)) > MAX_GRAM_CONDITION {
        return Ok(system.degenerate());
    }
    // ΦᵀΦ = RᵀR without forming the product.
    let qr = system.phi.clone().qr();
    let r: Matrix4<f64> = {
        let r = qr.r();
        Matrix4::from_fn(|i, j| r[(i, j)])
    };
    let qtb: Vector4<f64> = {
        let v = qr.q().transpose() * &system.b;
        Vector4::new(v[0], v[1], v[2], v[3])
    };
    let Some(pencil) = Pencil::new(&r, &qtb) else {
        return Ok(system.degenerate());
    };

    let mut candidates = Vec::new();
    let mut iterations = 0;
    let mut bracketed = true;
    match pencil.root_in_definite_interval() {
        RootSearch::Root {
            lambda,
            iterations: n,
        } => {
            iterations += n;
            candidates.push(system.polish(pencil.solution(lambda), lambda));
        }
        RootSearch::HardCase(cs) => candidates.extend(cs),
        RootSearch::NoBracket => bracketed = false,
    }

    let feasible = |c: &Vector4<f64>| {
        let r2 = c[1] * c[1] + c[2] * c[2] + c[3] * c[3];
        c[0] >= -1e-9 && (c[0] * c[0] - r2).abs() <= 1e-6 * (1.0 + r2)
    };
    if !candidates.iter().any(feasible) {
        // The global minimizer over the double cone sits on the D < 0 nappe;
        // the remaining stationary points are roots of φ outside the
        // definite interval.
        for lambda in pencil.outer_roots() {
            candidates.push(system.polish(pencil.solution(lambda), lambda));
        }
    }

    let best = candidates
        .into_iter()
        .filter(feasible)
        .map(|c| (system.cost(&c), c))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    Ok(match best {
        Some((_, c)) => system.result(c, Status::Converged, iterations),
        None if !bracketed => {
            let mut r = system.degenerate();
            r.status = Status::MaxIterations;
            r
        }
        None => system.degenerate(),
    })
}

enum RootSearch {
    Root { lambda: f64, iterations: usize },
    HardCase(Vec<Vector4<f64>>),
    NoBracket,
}

/// `ΦᵀΦ = RᵀR` and `D = diag(1, -1, -1, -1)` in a common eigenbasis: with
/// `W = R⁻¹Q`, `WᵀRᵀRW = I` and `WᵀDW = diag(μ)`.
struct Pencil {
    basis: Matrix4<f64>,
    mu: Vector4<f64>,
    h: Vector4<f64>,
}

const MAX_BISECTIONS: usize = 200;

impl Pencil {
    /// `qtb` is `Qᵀb` from the factorization `Φ = QR`.
    fn new(r: &Matrix4<f64>, qtb: &Vector4<f64>) -> Option<Self> {
        let r_inv = r.try_inverse()?;
        let d = Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, -1.0));
        let m = r_inv.transpose() * d * r_inv;
        let m = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m);
        let basis = r_inv * eig.eigenvectors;
        let h = eig.eigenvectors.transpose() * qtb;
        Some(Self {
            basis,
            mu: eig.eigenvalues,
            h,
        })
    }

    fn phi(&self, lambda: f64) -> f64 {
        (0..4)
            .map(|i| {
                let s = 1.0 + lambda * self.mu[i];
                self.mu[i] * self.h[i] * self.h[i] / (s * s)
            })
            .sum()
    }

    fn phi_prime(&self, lambda: f64) -> f64 {
        (0..4)
            .map(|i| {
                let s = 1.0 + lambda * self.mu[i];
                -2.0 * self.mu[i] * self.mu[i] * self.h[i] * self.h[i] / (s * s * s)
            })
            .sum()
    }

    fn solution(&self, lambda: f64) -> Vector4<f64> {
        let coeffs = Vector4::from_fn(|i, _| self.h[i] / (1.0 + lambda * self.mu[i]));
        self.basis * coeffs
    }

    /// `(-1/μ₊, -1/μ₋)`, bounded by the single positive eigenvalue and the
    /// most negative one.
    fn definite_interval(&self) -> Option<(f64, f64, usize, usize)> {
        let (mut pos, mut neg) = (None::<usize>, None::<usize>);
        for i in 0..4 {
            if self.mu[i] > 0.0 && pos.is_none_or(|p| self.mu[i] > self.mu[p]) {
                pos = Some(i);
            }
            if self.mu[i] < 0.0 && neg.is_none_or(|n| self.mu[i] < self.mu[n]) {
                neg = Some(i);
            }
        }
        let (p, n) = (pos?, neg?);
        Some((-1.0 / self.mu[p], -1.0 / self.mu[n], p, n))
    }

    fn root_in_definite_interval(&self) -> RootSearch {
        let Some((lo, hi, lo_idx, hi_idx)) = self.definite_interval() else {
            return RootSearch::NoBracket;
        };
        // φ is strictly decreasing on (lo, hi) and 0 lies inside.
        let at_zero = self.phi(0.0);
        if at_zero == 0.0 {
            return RootSearch::Root {
                lambda: 0.0,
                iterations: 0,
            };
        }
        let (mut a, mut b) = if at_zero > 0.0 { (0.0, hi) } else { (lo, 0.0) };
        // Walk the open end toward the pole until φ changes sign.
        let mut found = false;
        for k in 1..=1100 {
            let t = 0.5f64.powi(k.min(1074));
            if at_zero > 0.0 {
                let x = hi - hi * t;
                if x >= hi {
                    break;
                }
                if self.phi(x) < 0.0 {
                    b = x;
                    found = true;
                    break;
                }
                a = x;
            } else {
                let x = lo - lo * t;
                if x <= lo {
                    break;
                }
                if self.phi(x) > 0.0 {
                    a = x;
                    found = true;
                    break;
                }
                b = x;
            }
        }
        if !found {
            let (pole, idx) = if at_zero > 0.0 {
                (hi, hi_idx)
            } else {
                (lo, lo_idx)
            };
            return match self.hard_case(pole, idx) {
                Some(cs) => RootSearch::HardCase(cs),
                None => RootSearch::NoBracket,
            };
        }
        let (lambda, iterations) = self.refine(a, b);
        RootSearch::Root { lambda, iterations }
    }

    /// Bisection down to a 1e-8 relative bracket, then safeguarded Newton.
    fn refine(&self, mut a: f64, mut b: f64) -> (f64, usize) {
        let sign_a = self.phi(a).signum();
        let mut iterations = 0;
        while iterations < MAX_BISECTIONS && (b - a) > 1e-8 * (1.0 + a.abs().max(b.abs())) {
            let mid = 0.5 * (a + b);
            let v = self.phi(mid);
            if v == 0.0 {
                return (mid, iterations + 1);
            }
            if v.signum() == sign_a {
                a = mid;
            } else {
                b = mid;
            }
            iterations += 1;
        }
        let mut x = 0.5 * (a + b);
        for _ in 0..50 {
            iterations += 1;
            let v = self.phi(x);
            if v == 0.0 {
                break;
            }
            if v.signum() == sign_a {
                a = x;
            } else {
                b = x;
            }
            let d = self.phi_prime(x);
            let newton = x - v / d;
            let next = if d != 0.0 && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
            if next == x || (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
                x = next;
                break;
            }
            x = next;
        }
        (x, iterations)
    }

    /// At the pole `λ* = -1/μ_k` with `h_k = 0`, add a null-space component
    /// `t·w_k` so that the constraint holds.
    fn hard_case(&self, lambda: f64, k: usize) -> Option<Vec<Vector4<f64>>> {
        let scale = self.h.amax().max(1e-300);
        if self.h[k].abs() > 1e-10 * scale {
            return None;
        }
        let coeffs = Vector4::from_fn(|i, _| {
            if i == k {
                0.0
            } else {
                self.h[i] / (1.0 + lambda * self.mu[i])
            }
        });
        let partial: f64 = (0..4)
            .filter(|&i| i != k)
            .map(|i| self.mu[i] * coeffs[i] * coeffs[i])
            .sum();
        let t2 = -partial / self.mu[k];
        if t2.is_nan() || t2 < 0.0 {
            return None;
        }
        let base = self.basis * coeffs;
        let w = self.basis.column(k).into_owned() * t2.sqrt();
        Some(vec![base + w, base - w])
    }

    /// Roots of φ outside the definite interval, found by sampling each
    /// pole-delimited interval for sign changes.
    fn outer_roots(&self) -> Vec<f64> {
        let mut poles: Vec<f64> = self
            .mu
            .iter()
            .filter(|m| **m != 0.0)
            .map(|m| -1.0 / m)
            .collect();
        poles.sort_by(f64::total_cmp);
        poles.dedup();
        let definite = self.definite_interval();
        let mut samples: Vec<Vec<f64>> = Vec::new();
        let unbounded = |anchor: f64, dir: f64| -> Vec<f64> {
            (-120..=120)
                .map(|k| anchor + dir * 10f64.powf(k as f64 / 10.0))
                .collect()
        };
        if let (Some(&first), Some(&last)) = (poles.first(), poles.last()) {
            let mut left = unbounded(first, -1.0);
            left.reverse();
            samples.push(left);
            samples.push(unbounded(last, 1.0));
        }
        for w in poles.windows(2) {
            let (a, b) = (w[0], w[1]);
            if definite.is_some_and(|(lo, hi, _, _)| lo == a && hi == b) {
                continue;
            }
            let n = 400;
            samples.push(
                (1..n)
                    .map(|i| {
                        let t = i as f64 / n as f64;
                        a + (b - a) * 0.5 * (1.0 - (std::f64::consts::PI * t).cos())
                    })
                    .collect(),
            );
        }
        let mut roots = Vec::new();
        for grid in samples {
            for pair in grid.windows(2) {
                let (x0, x1) = (pair[0], pair[1]);
                let (v0, v1) = (self.phi(x0), self.phi(x1));
                if v0 == 0.0 {
                    roots.push(x0);
                } else if v0.signum() != v1.signum() && v1 != 0.0 {
                    let (lo, hi) = if x0 < x1 { (x0, x1) } else { (x1, x0) };
                    roots.push(self.refine(lo, hi).0);
                }
            }
        }
        roots
    }
}
