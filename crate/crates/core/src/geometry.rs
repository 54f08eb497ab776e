//! Scenes, range differences and reference-microphone selection.
//!
//! Sign convention: `d[m][m'] = D[m'] - D[m]`, where `D[m]` is the distance
//! from microphone `m` to the source. A positive entry means the signal
//! reaches `m'` later than `m`.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Speed of sound in air at 20 °C, in m/s.
pub const DEFAULT_SOUND_SPEED: f64 = 343.0;

const MIN_MIC_SEPARATION: f64 = 1e-9;
const ANTISYMMETRY_TOL: f64 = 1e-9;

/// Microphone positions, a source position and the propagation speed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    mics: Vec<Point>,
    source: Point,
    sound_speed: f64,
}

impl Scene {
    pub fn new(mics: Vec<Point>, source: Point, sound_speed: f64) -> Result<Self> {
        validate_mics(&mics)?;
        if !source.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidScene("non-finite source coordinate".into()));
        }
        if !(sound_speed.is_finite() && sound_speed > 0.0) {
            return Err(Error::InvalidScene(format!(
                "sound speed must be positive, got {sound_speed}"
            )));
        }
        Ok(Self {
            mics,
            source,
            sound_speed,
        })
    }

    pub fn mics(&self) -> &[Point] {
        &self.mics
    }

    pub fn source(&self) -> Point {
        self.source
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn mic_count(&self) -> usize {
        self.mics.len()
    }

    /// Source-to-microphone distances `D[m]`.
    pub fn distances(&self) -> Vec<f64> {
        self.mics.iter().map(|m| (m - self.source).norm()).collect()
    }

    /// Times of flight in seconds.
    pub fn times_of_flight(&self) -> Vec<f64> {
        self.distances()
            .into_iter()
            .map(|d| d / self.sound_speed)
            .collect()
    }

    /// Restricts the scene to the given microphones, keeping their order.
    pub fn subset(&self, indices: &[usize]) -> Result<Scene> {
        let mics = indices
            .iter()
            .map(|&i| {
                self.mics.get(i).copied().ok_or(Error::IndexOutOfRange {
                    index: i,
                    count: self.mics.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(mics, self.source, self.sound_speed)
    }

    pub fn translated(&self, offset: &Point) -> Scene {
        Scene {
            mics: self.mics.iter().map(|m| m + offset).collect(),
            source: self.source + offset,
            sound_speed: self.sound_speed,
        }
    }
}

pub(crate) fn validate_mics(mics: &[Point]) -> Result<()> {
    if mics.len() < 2 {
        return Err(Error::InvalidScene(format!(
            "need at least 2 microphones, got {}",
            mics.len()
        )));
    }
    if !mics.iter().flat_map(|m| m.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidScene(
            "non-finite microphone coordinate".into(),
        ));
    }
    for i in 0..mics.len() {
        for j in i + 1..mics.len() {
            if (mics[i] - mics[j]).norm() <= MIN_MIC_SEPARATION {
                return Err(Error::InvalidScene(format!(
                    "microphones {i} and {j} coincide"
                )));
            }
        }
    }
    Ok(())
}

/// Full pairwise range differences (the extended observation set).
#[derive(Debug, Clone, PartialEq)]
pub struct RdMatrix {
    values: DMatrix<f64>,
}

impl RdMatrix {
    /// Validates a square matrix with zero diagonal that is antisymmetric to
    /// within 1e-9 m. The upper triangle is kept and mirrored, so the stored
    /// matrix is exactly antisymmetric.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let m = values.nrows();
        if values.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "range-difference matrix must be square, got {}x{}",
                m,
                values.ncols()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("range-difference matrix"));
        }
        let mut deviation = 0.0f64;
        for i in 0..m {
            deviation = deviation.max(values[(i, i)].abs());
            for j in i + 1..m {
                deviation = deviation.max((values[(i, j)] + values[(j, i)]).abs());
            }
        }
        if deviation > ANTISYMMETRY_TOL {
            return Err(Error::NotAntisymmetric { deviation });
        }
        Ok(Self::from_upper(m, |i, j| values[(i, j)]))
    }

    /// Builds an exactly antisymmetric matrix from an upper-triangle generator.
    pub fn from_upper(m: usize, mut upper: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i + 1..m {
                let v = upper(i, j);
                values[(i, j)] = v;
                values[(j, i)] = -v;
            }
        }
        Self { values }
    }

    pub fn mic_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, m: usize, m_prime: usize) -> f64 {
        self.values[(m, m_prime)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Extracts the non-redundant set anchored at `reference`.
    pub fn reference_vector(&self, reference: usize) -> Result<RdVector> {
        let m = self.mic_count();
        if reference >= m {
            return Err(Error::IndexOutOfRange {
                index: reference,
                count: m,
            });
        }
        let values = (0..m)
            .filter(|&j| j != reference)
            .map(|j| self.values[(reference, j)])
            .collect();
        Ok(RdVector { reference, values })
    }

    /// The sub-matrix over the given microphones, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<RdMatrix> {
        let m = self.mic_count();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                count: m,
            });
        }
        Ok(Self::from_upper(indices.len(), |i, j| {
            self.values[(indices[i], indices[j])]
        }))
    }

    /// Mean absolute entry-wise difference over the upper triangle.
    pub fn mean_abs_difference(&self, other: &RdMatrix) -> Result<f64> {
        let m = self.mic_count();
        if other.mic_count() != m {
            return Err(Error::DimensionMismatch(format!(
                "{m} vs {} microphones",
                other.mic_count()
            )));
        }
        let pairs = m * (m - 1) / 2;
        if pairs == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                total += (self.values[(i, j)] - other.values[(i, j)]).abs();
            }
        }
        Ok(total / pairs as f64)
    }
}

/// Reference-anchored range differences `d[reference][m']` for every
/// `m' != reference`, in ascending microphone order.
#[derive(Debug, Clone, PartialEq)]
pub struct RdVector {
    reference: usize,
    values: Vec<f64>,
}

impl RdVector {
    /// `values` must hold one entry per non-reference microphone.
    pub fn new(reference: usize, values: Vec<f64>) -> Result<Self> {
        if reference > values.len() {
            return Err(Error::IndexOutOfRange {
                index: reference,
                count: values.len() + 1,
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("range-difference vector"));
        }
        Ok(Self { reference, values })
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mic_count(&self) -> usize {
        self.values.len() + 1
    }

    /// Microphone indices matching `values()` entry by entry.
    pub fn mic_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.mic_count()).filter(move |&j| j != self.reference)
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            reference: self.reference,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    ClosedForm,
    Degenerate,
    MaxIterations,
}

impl Status {
    pub fn is_success(self) -> bool {
        matches!(self, Status::Converged | Status::ClosedForm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Converged => "converged",
            Status::ClosedForm => "closed_form",
            Status::Degenerate => "degenerate",
            Status::MaxIterations => "max_iterations",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Estimator output. `residual` is the estimator's own cost at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub position: Point,
    pub residual: f64,
    pub status: Status,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Iterations taken by iterative solvers.
    pub iterations: usize,
    /// Conic triplets excluded for a vanishing plane normal.
    pub dropped_rows: usize,
    /// Spherical estimate `[D, r]` in reference-centred coordinates.
    pub spherical: Option<SphericalEstimate>,
}

/// The spherical-LS unknown `c = [D, r]` expressed relative to the
/// reference microphone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalEstimate {
    pub range: f64,
    pub local_position: Point,
}

impl SphericalEstimate {
    /// `|D^2 - |r|^2|`: zero when the range and position agree.
    pub fn constraint_violation(&self) -> f64 {
        (self.range * self.range - self.local_position.norm_squared()).abs()
    }

    /// Whether the estimate satisfies the cone constraint and `D >= 0` at the
    /// given tolerances.
    pub fn is_feasible(&self) -> bool {
        let r2 = self.local_position.norm_squared();
        self.constraint_violation() <= 1e-6 * (1.0 + r2) && self.range >= -1e-9
    }
}

/// `d[m][m'] = |r_m' - r_s| - |r_m - r_s|` for every pair.
pub fn true_rd_full(scene: &Scene) -> RdMatrix {
    let dist = scene.distances();
    RdMatrix::from_upper(dist.len(), |i, j| dist[j] - dist[i])
}

/// The non-redundant set anchored at `reference`.
pub fn true_rd_ref(scene: &Scene, reference: usize) -> Result<RdVector> {
    let m = scene.mic_count();
    if reference >= m {
        return Err(Error::IndexOutOfRange {
            index: reference,
            count: m,
        });
    }
    let dist = scene.distances();
    let values = (0..m)
        .filter(|&j| j != reference)
        .map(|j| dist[j] - dist[reference])
        .collect();
    Ok(RdVector { reference, values })
}

/// Range difference in meters from a delay in seconds.
pub fn tdoa_to_rd(tdoa_seconds: f64, sound_speed: f64) -> f64 {
    sound_speed * tdoa_seconds
}

/// Signal-free reference policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometricReference {
    NearestBarycenter,
    Fixed(usize),
}

/// Largest distance between two microphones.
pub fn array_diameter(mics: &[Point]) -> f64 {
    mics.iter()
        .flat_map(|a| mics.iter().map(move |b| (a - b).norm()))
        .fold(0.0, f64::max)
}

pub fn barycenter(points: &[Point]) -> Point {
    let sum = points.iter().fold(Point::zeros(), |acc, p| acc + p);
    sum / points.len().max(1) as f64
}

/// Picks the reference microphone. Ties resolve to the lowest index.
pub fn select_reference(mics: &[Point], policy: GeometricReference) -> Result<usize> {
    if mics.is_empty() {
        return Err(Error::InvalidScene("no microphones".into()));
    }
    match policy {
        GeometricReference::Fixed(index) if index < mics.len() => Ok(index),
        GeometricReference::Fixed(index) => Err(Error::IndexOutOfRange {
            index,
            count: mics.len(),
        }),
        GeometricReference::NearestBarycenter => {
            let center = barycenter(mics);
            Ok(argmin_first(mics.iter().map(|m| (m - center).norm())))
        }
    }
}

/// Index of the first minimum.
pub(crate) fn argmin_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Index of the first maximum.
pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// The synthetic stand-in for the lab setup: eight microphones on a circle of
/// radius 2.28 m around the origin, heights alternating 10 cm above and below
/// 1.04 m, and the three loudspeaker positions at 1.19 m height.
pub mod lab_scene {
    use super::*;

    pub const ARRAY_RADIUS: f64 = 2.28;
    pub const MIC_HEIGHT: f64 = 1.04;
    pub const MIC_HEIGHT_STAGGER: f64 = 0.10;
    pub const SOURCE_HEIGHT: f64 = 1.19;

    /// Source positions 1..=3, in meters.
    pub const SOURCES: [[f64; 3]; 3] = [
        [-0.80, -0.80, SOURCE_HEIGHT],
        [0.00, -0.80, SOURCE_HEIGHT],
        [0.80, -0.80, SOURCE_HEIGHT],
    ];

    pub fn mics() -> Vec<Point> {
        (0..8)
            .map(|k| {
                let angle = k as f64 * std::f64::consts::FRAC_PI_4;
                let stagger = if k % 2 == 0 {
                    MIC_HEIGHT_STAGGER
                } else {
                    -MIC_HEIGHT_STAGGER
                };
                Point::new(
                    ARRAY_RADIUS * angle.cos(),
                    ARRAY_RADIUS * angle.sin(),
                    MIC_HEIGHT + stagger,
                )
            })
            .collect()
    }

    /// Scene for source position `position` (1-based, as in the lab table).
    pub fn scene(position: usize, sound_speed: f64) -> Result<Scene> {
        let source = SOURCES
            .get(position.wrapping_sub(1))
            .ok_or(Error::IndexOutOfRange {
                index: position,
                count: SOURCES.len(),
            })?;
        Scene::new(mics(), Point::from(*source), sound_speed)
    }
}
