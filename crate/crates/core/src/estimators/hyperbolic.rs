//! Hyperbolic least squares and its weighted (Gaussian ML) generalization,
//! minimized by damped Gauss-Newton.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use super::{check_mics, usrd_ls};
use crate::error::{Error, Result};
use crate::geometry::{barycenter, Diagnostics, LocalizationResult, Point, RdVector, Status};

/// Measurement-noise covariance of the reference-anchored RD vector, in m².
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    sigma: DMatrix<f64>,
    /// Upper factor `U` with `Σ⁻¹ = UᵀU`; whitened residuals are `U e`.
    whitener: DMatrix<f64>,
}

impl NoiseCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if n == 0 || sigma.ncols() != n {
            return Err(Error::InvalidCovariance(format!(
                "expected a non-empty square matrix, got {}x{}",
                n,
                sigma.ncols()
            )));
        }
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let scale = sigma.amax().max(1.0);
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidCovariance(format!(
                "asymmetry {asym:e} exceeds tolerance"
            )));
        }
        let eig = SymmetricEigen::new(sigma.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidCovariance(format!(
                "smallest eigenvalue {:e} is not positive",
                eig.eigenvalues.min()
            )));
        }
        let inverse = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidCovariance("Cholesky factorization failed".into()))?
            .inverse();
        let inverse = (&inverse + inverse.transpose()) * 0.5;
        let lower = inverse
            .cholesky()
            .ok_or_else(|| Error::InvalidCovariance("inverse is not positive definite".into()))?
            .l();
        Ok(Self {
            sigma,
            whitener: lower.transpose(),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            sigma: DMatrix::identity(n, n),
            whitener: DMatrix::identity(n, n),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct HyperbolicOptions {
    /// Starting point; defaults to the unconstrained spherical estimate, or
    /// the array barycenter when that is unavailable.
    pub init: Option<Point>,
    /// Defaults to the identity, which is plain hyperbolic LS.
    pub covariance: Option<NoiseCovariance>,
    pub max_iter: usize,
    /// Convergence tolerance on the remaining Newton step, in meters.
    pub tol: f64,
}

impl Default for HyperbolicOptions {
    fn default() -> Self {
        Self {
            init: None,
            covariance: None,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

const INITIAL_DAMPING: f64 = 1e-3;
const COLLISION_RADIUS: f64 = 1e-9;
const COLLISION_NUDGE: f64 = 1e-6;
/// Rounding allowance, in units of epsilon, for one cost evaluation.
const COST_RESOLUTION: f64 = 64.0 * f64::EPSILON;
const STALL_LIMIT: usize = 3;
/// Iterates this many array radii away are treated as diverging.
const RUNAWAY: f64 = 1e6;

struct Model<'a> {
    observed: &'a [f64],
    /// Non-reference microphones relative to the reference one.
    others: Vec<Point>,
    whitener: Option<&'a DMatrix<f64>>,
}

impl Model<'_> {
    /// Whitened residual `U (d̂(r) - d)` and its Jacobian.
    fn evaluate(&self, r: &Point) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.observed.len();
        let d_ref = r.norm();
        let mut res = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, 3);
        for (i, mic) in self.others.iter().enumerate() {
            let to_mic = r - mic;
            let d = to_mic.norm();
            res[i] = d - d_ref - self.observed[i];
            let g = to_mic / d - r / d_ref;
            jac.set_row(i, &g.transpose());
        }
        match self.whitener {
            Some(u) => (u * res, u * jac),
            None => (res, jac),
        }
    }

    /// Smallest cost change distinguishable from rounding at `r`. Each
    /// residual carries an error proportional to the distances involved.
    fn cost_floor(&self, r: &Point, res: &DVector<f64>) -> f64 {
        let reach = self.others.iter().map(|m| m.norm()).fold(0.0, f64::max)
            + self.observed.iter().fold(0.0, |a: f64, d| a.max(d.abs()))
            + r.norm();
        let gain = self.whitener.map_or(1.0, |u| u.norm());
        let norm = res.norm();
        COST_RESOLUTION * norm * (norm + gain * reach)
    }

    fn runaway(&self, r: &Point) -> bool {
        let radius = self.others.iter().map(|m| m.norm()).fold(0.0, f64::max);
        r.norm() > RUNAWAY * radius
    }

    fn cost(&self, r: &Point) -> f64 {
        self.evaluate(r).0.norm_squared()
    }

    /// Length of the full Newton step, `|(JᵀJ + Σ wᵢ∇²rᵢ)⁻¹ Jᵀr|`, where
    /// `w = Uᵀr`. `None` when the Hessian is not positive definite.
    fn newton_distance(&self, r: &Point, res: &DVector<f64>, jac: &DMatrix<f64>) -> Option<f64> {
        let weights = match self.whitener {
            Some(u) => u.transpose() * res,
            None => res.clone(),
        };
        let d_ref = r.norm();
        let b = r / d_ref;
        let ref_curvature = (Matrix3::identity() - b * b.transpose()) / d_ref;
        let mut hessian: Matrix3<f64> = {
            let g = jac.transpose() * jac;
            Matrix3::from_fn(|i, j| g[(i, j)])
        };
        for (mic, w) in self.others.iter().zip(weights.iter()) {
            let to_mic = r - mic;
            let d = to_mic.norm();
            let a = to_mic / d;
            hessian += (((Matrix3::identity() - a * a.transpose()) / d) - ref_curvature) * *w;
        }
        let grad = jac.transpose() * res;
        let grad = Vector3::new(grad[0], grad[1], grad[2]);
        hessian.cholesky().map(|c| c.solve(&grad).norm())
    }
}

/// Moves `r` off any microphone it coincides with. Returns `None` when the
/// nudge direction is undefined.
fn guard_collision(r: Point, mics: &[Point], center: &Point) -> Option<Point> {
    if mics.iter().all(|m| (r - m).norm() >= COLLISION_RADIUS) {
        return Some(r);
    }
    let dir = center - r;
    let len = dir.norm();
    if len < COLLISION_RADIUS {
        return None;
    }
    let nudged = r + dir * (COLLISION_NUDGE / len);
    mics.iter()
        .all(|m| (nudged - m).norm() >= COLLISION_RADIUS)
        .then_some(nudged)
}

/// Minimizes `(d - d̂(r))ᵀ Σ⁻¹ (d - d̂(r))` from a starting point. The cost
/// never increases across accepted steps.
pub fn hyperbolic_ls(
    rd: &RdVector,
    mics: &[Point],
    options: &HyperbolicOptions,
) -> Result<LocalizationResult> {
    check_mics(mics, rd.mic_count())?;
    if rd.mic_count() < 4 {
        return Err(Error::InsufficientMicrophones {
            method: "hyperbolic",
            needed: 4,
            got: rd.mic_count(),
        });
    }
    if let Some(cov) = &options.covariance {
        if cov.dim() != rd.values().len() {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {0}x{0} for {1} range differences",
                cov.dim(),
                rd.values().len()
            )));
        }
    }
    // Work relative to the reference microphone.
    let origin = mics[rd.reference()];
    let local: Vec<Point> = mics.iter().map(|m| m - origin).collect();
    let center = barycenter(&local);
    let init = match options.init {
        Some(p) if p.iter().all(|v| v.is_finite()) => p - origin,
        Some(_) => return Err(Error::NonFinite("initial position")),
        None => match usrd_ls(rd, mics) {
            Ok(res) if res.status.is_success() => res
                .diagnostics
                .spherical
                .map_or(res.position - origin, |s| s.local_position),
            _ => center,
        },
    };

    let model = Model {
        observed: rd.values(),
        others: rd.mic_indices().map(|j| local[j]).collect(),
        whitener: options.covariance.as_ref().map(|c| &c.whitener),
    };
    let degenerate = |iterations| LocalizationResult {
        position: Point::repeat(f64::NAN),
        residual: f64::NAN,
        status: Status::Degenerate,
        diagnostics: Diagnostics {
            iterations,
            ..Diagnostics::default()
        },
    };

    let Some(mut r) = guard_collision(init, &local, &center) else {
        return Ok(degenerate(0));
    };
    let (mut res, mut jac) = model.evaluate(&r);
    let mut cost = res.norm_squared();
    let initial_cost = cost;
    let mut damping = INITIAL_DAMPING;
    let mut status = Status::MaxIterations;
    let mut iterations = 0;
    let mut stalls = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let jtj: Matrix3<f64> = {
            let g = jac.transpose() * &jac;
            Matrix3::from_fn(|i, j| g[(i, j)])
        };
        let grad: Vector3<f64> = {
            let g = jac.transpose() * &res;
            Vector3::new(g[0], g[1], g[2])
        };
        // Damping proportional to the mean curvature keeps the iterates
        // invariant under uniform scaling of the covariance.
        let scale = jtj.trace() / 3.0;
        if scale.is_nan() || scale <= 0.0 {
            if model.runaway(&r) {
                break;
            }
            if grad.norm() == 0.0 {
                status = Status::Converged;
                break;
            }
            return Ok(degenerate(iterations));
        }
        let gauss_newton = jtj.cholesky().map(|c| c.solve(&(-grad)));
        let lhs = jtj + Matrix3::identity() * (damping * scale);
        let Some(step) = lhs.cholesky().map(|c| c.solve(&(-grad))) else {
            damping *= 10.0;
            continue;
        };
        let Some(candidate) = guard_collision(r + step, &local, &center) else {
            return Ok(degenerate(iterations));
        };
        let candidate_cost = model.cost(&candidate);
        // Steps whose predicted gain is lost in rounding cannot be judged by
        // the cost; take them unless the cost visibly rises.
        let predicted = -2.0 * grad.dot(&step) - step.dot(&(jtj * step));
        let floor = model.cost_floor(&r, &res);
        let improved = candidate_cost < cost;
        let tolerable = candidate_cost <= (cost + floor).min(initial_cost);
        if improved || (predicted <= floor && tolerable) {
            let cost_before = cost;
            r = candidate;
            (res, jac) = model.evaluate(&r);
            cost = res.norm_squared();
            damping /= 10.0;
            let gn_gain = gauss_newton.map_or(predicted, |gn| -grad.dot(&gn));
            // Repeated steps without measurable progress: rounding floor.
            let progress = cost_before - cost;
            stalls = if progress <= floor && gn_gain <= floor {
                stalls + 1
            } else {
                0
            };
            if model.runaway(&r) {
                continue;
            }
            let remaining = model.newton_distance(&r, &res, &jac);
            if remaining.is_some_and(|d| d < options.tol) || stalls >= STALL_LIMIT {
                status = Status::Converged;
                break;
            }
        } else {
            damping *= 10.0;
        }
    }

    Ok(LocalizationResult {
        position: r + origin,
        residual: cost,
        status,
        diagnostics: Diagnostics {
            iterations,
            ..Diagnostics::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{true_rd_ref, Scene, DEFAULT_SOUND_SPEED};

    fn p(x: f64, y: f64, z: f64) -> Point {
        Point::new(x, y, z)
    }

    fn scene8(source: Point) -> Scene {
        Scene::new(
            vec![
                p(0.0, 0.0, 0.0),
                p(3.0, 0.0, 0.2),
                p(0.1, 2.5, 0.0),
                p(0.0, 0.3, 2.0),
                p(2.8, 2.6, 0.4),
                p(2.5, 0.2, 2.2),
                p(0.3, 2.4, 2.6),
                p(2.9, 2.7, 2.4),
            ],
            source,
            DEFAULT_SOUND_SPEED,
        )
        .unwrap()
    }

    fn noisy(rd: &RdVector) -> RdVector {
        let noise = [0.03, -0.05, 0.02, 0.04, -0.01, -0.06, 0.05];
        rd.with_values(rd.values().iter().zip(noise).map(|(d, n)| d + n).collect())
    }

    #[test]
    fn starts_at_truth() {
        let scene = scene8(p(1.3, 1.2, 1.1));
        let rd = true_rd_ref(&scene, 0).unwrap();
        let opts = HyperbolicOptions {
            init: Some(scene.source()),
            ..Default::default()
        };
        let res = hyperbolic_ls(&rd, scene.mics(), &opts).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!(res.residual < 1e-24);
        assert_eq!(res.diagnostics.iterations, 1);
        assert!((res.position - scene.source()).norm() < 1e-12);
    }

    #[test]
    fn default_init_converges_to_source() {
        let scene = scene8(p(0.7, 1.9, 0.4));
        let rd = true_rd_ref(&scene, 3).unwrap();
        let res = hyperbolic_ls(&rd, scene.mics(), &HyperbolicOptions::default()).unwrap();
        assert_eq!(res.status, Status::Converged);
        assert!((res.position - scene.source()).norm() <= 1e-6);
    }

    #[test]
    fn uniform_covariance_scaling_gives_identical_iterates() {
        let scene = scene8(p(0.7, 1.9, 0.4));
        let rd = noisy(&true_rd_ref(&scene, 0).unwrap());
        let init = Some(p(1.5, 1.5, 1.5));
        let a = hyperbolic_ls(
            &rd,
            scene.mics(),
            &HyperbolicOptions {
                init,
                covariance: Some(NoiseCovariance::identity(7)),
                ..Default::default()
            },
        )
        .unwrap();
        let b = hyperbolic_ls(
            &rd,
            scene.mics(),
            &HyperbolicOptions {
                init,
                covariance: Some(NoiseCovariance::new(DMatrix::identity(7, 7) * 4.0).unwrap()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.position, b.position);
        assert_eq!(a.diagnostics.iterations, b.diagnostics.iterations);
        assert_eq!(a.residual, 4.0 * b.residual);
    }

    #[test]
    fn weighted_cost_is_not_above_initial_cost() {
        let scene = scene8(p(2.0, 0.5, 1.5));
        let rd = noisy(&true_rd_ref(&scene, 1).unwrap());
        let mut sigma = DMatrix::from_element(7, 7, 0.002);
        for i in 0..7 {
            sigma[(i, i)] = 0.01 * (1.0 + i as f64);
        }
        let cov = NoiseCovariance::new(sigma.clone()).unwrap();
        let init = p(0.5, 0.5, 0.5);
        let opts = HyperbolicOptions {
            init: Some(init),
            covariance: Some(cov),
            ..Default::default()
        };
        let res = hyperbolic_ls(&rd, scene.mics(), &opts).unwrap();
        let pred = |r: Point| -> DVector<f64> {
            let d_ref = (r - scene.mics()[1]).norm();
            DVector::from_iterator(
                7,
                rd.mic_indices()
                    .zip(rd.values())
                    .map(|(j, d)| d - ((scene.mics()[j] - r).norm() - d_ref)),
            )
        };
        let inv = sigma.try_inverse().unwrap();
        let cost = |r: Point| {
            let e = pred(r);
            (e.transpose() * &inv * &e)[0]
        };
        assert!((cost(res.position) - res.residual).abs() < 1e-9 * (1.0 + res.residual));
        assert!(res.residual <= cost(init));
    }

    #[test]
    fn covariance_validation() {
        assert!(
            NoiseCovariance::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err()
        );
        assert!(
            NoiseCovariance::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err()
        );
        assert!(NoiseCovariance::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).is_ok());
    }

    #[test]
    fn init_on_a_microphone_is_nudged() {
        let scene = scene8(p(1.3, 1.2, 1.1));
        let rd = true_rd_ref(&scene, 0).unwrap();
        let opts = HyperbolicOptions {
            init: Some(scene.mics()[4]),
            ..Default::default()
        };
        let res = hyperbolic_ls(&rd, scene.mics(), &opts).unwrap();
        assert!(res.position.iter().all(|v| v.is_finite()));
        assert_ne!(res.status, Status::Degenerate);
    }
}
