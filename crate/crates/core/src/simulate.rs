//! Synthetic observations: RD-domain noise injection and free-field
//! microphone signals `y_m(t) = a_m x(t - τ_m) + n_m(t)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, RdMatrix, RdVector, Scene};
use crate::tdoa::{FrameConfig, MicSignals};

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds indices into a base seed. Independent of evaluation order, so
/// parallel trials draw the same streams as sequential ones.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(base), |acc, &p| {
        mix64(acc ^ mix64(p.wrapping_add(0x632B_E59B_D9B4_E019)))
    })
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    /// Laplacian with the same standard deviation `sigma`.
    Laplacian,
    /// Gaussian with standard deviation `sigma`, except that a `fraction` of
    /// entries use `sigma * scale`.
    OutlierMixture {
        fraction: f64,
        scale: f64,
    },
}

/// Additive noise on range differences, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdNoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl RdNoiseModel {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if let NoiseKind::OutlierMixture { fraction, scale } = self.kind {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::InvalidConfig(format!(
                    "outlier fraction must lie in [0, 1], got {fraction}"
                )));
            }
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "outlier scale must be non-negative, got {scale}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let std_normal = || Normal::new(0.0, 1.0).expect("unit normal");
        match self.kind {
            NoiseKind::Gaussian => self.sigma * std_normal().sample(rng),
            NoiseKind::Laplacian => {
                let b = self.sigma / std::f64::consts::SQRT_2;
                let u: f64 = rng.random::<f64>() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            NoiseKind::OutlierMixture { fraction, scale } => {
                let s = if rng.random::<f64>() < fraction {
                    self.sigma * scale
                } else {
                    self.sigma
                };
                s * std_normal().sample(rng)
            }
        }
    }

    /// Adds i.i.d. noise to the upper triangle and mirrors it.
    pub fn perturb_matrix(&self, rd: &RdMatrix) -> RdMatrix {
        let mut rng = rng_from_seed(self.seed);
        RdMatrix::from_upper(rd.mic_count(), |i, j| rd.get(i, j) + self.sample(&mut rng))
    }

    pub fn perturb_vector(&self, rd: &RdVector) -> RdVector {
        let mut rng = rng_from_seed(self.seed);
        rd.with_values(
            rd.values()
                .iter()
                .map(|d| d + self.sample(&mut rng))
                .collect(),
        )
    }
}

/// Axis-aligned box for random scene generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: Point,
    pub max: Point,
}

impl SceneBounds {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        if (0..3).any(|k| !(min[k].is_finite() && max[k].is_finite() && max[k] > min[k])) {
            return Err(Error::InvalidConfig(format!(
                "scene bounds need min < max on every axis, got {min:?} and {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    fn extent(&self) -> f64 {
        (self.max - self.min).norm()
    }
}

const MAX_SCENE_ATTEMPTS: usize = 10_000;

/// Draws a well-conditioned scene: microphones uniform in the box, mutually
/// separated and clearly non-coplanar, and the source a random convex
/// combination of the microphones (so inside their hull) away from all of
/// them.
pub fn random_scene(
    rng: &mut impl Rng,
    mic_count: usize,
    bounds: &SceneBounds,
    sound_speed: f64,
) -> Result<Scene> {
    if mic_count < 4 {
        return Err(Error::InsufficientMicrophones {
            method: "random scene",
            needed: 4,
            got: mic_count,
        });
    }
    let margin = 0.1 * bounds.extent();
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let mics: Vec<Point> = (0..mic_count)
            .map(|_| Point::from_fn(|k, _| rng.random_range(bounds.min[k]..bounds.max[k])))
            .collect();
        let separated = (0..mic_count)
            .all(|i| (i + 1..mic_count).all(|j| (mics[i] - mics[j]).norm() >= margin));
        if !separated || spread(&mics) < 0.5 * margin {
            continue;
        }
        let weights: Vec<f64> = (0..mic_count)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = weights.iter().sum();
        let source = mics
            .iter()
            .zip(&weights)
            .fold(Point::zeros(), |acc, (m, w)| acc + m * (w / total));
        if mics.iter().all(|m| (m - source).norm() >= 0.5 * margin) {
            return Scene::new(mics, source, sound_speed);
        }
    }
    Err(Error::InvalidConfig(
        "could not draw a well-conditioned scene in the given bounds".into(),
    ))
}

/// Smallest singular value of the centred microphone coordinates, scaled to
/// an RMS distance from the best-fit plane.
fn spread(mics: &[Point]) -> f64 {
    let center = crate::geometry::barycenter(mics);
    let centred = nalgebra::DMatrix::from_fn(mics.len(), 3, |i, k| mics[i][k] - center[k]);
    let sv = centred.singular_values();
    sv.min() / (mics.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainLaw {
    Unit,
    /// `a_m = 1 / max(D_m, 0.1 m)`.
    #[default]
    InverseDistance,
}

impl GainLaw {
    pub fn gain(self, distance: f64) -> f64 {
        match self {
            GainLaw::Unit => 1.0,
            GainLaw::InverseDistance => 1.0 / distance.max(0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    /// Unit-variance white Gaussian noise.
    WhiteNoise,
    /// Caller-supplied samples at the synthesis sample rate. Must cover the
    /// requested duration plus the largest propagation delay.
    Samples(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalModel {
    pub gain_law: GainLaw,
    /// Per-channel SNR in dB; `None` synthesizes noiseless channels.
    pub snr_db: Option<f64>,
    pub source: SourceKind,
    pub seed: u64,
}

impl SignalModel {
    pub fn white_noise(snr_db: Option<f64>, seed: u64) -> Self {
        Self {
            gain_law: GainLaw::default(),
            snr_db,
            source: SourceKind::WhiteNoise,
            seed,
        }
    }
}

/// Half-width of the fractional-delay kernel; 32 taps in total.
const SINC_HALF_WIDTH: i64 = 16;
const KAISER_BETA: f64 = 8.0;

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc evaluated at offset `t` samples.
fn kaiser_sinc(t: f64) -> f64 {
    let half = SINC_HALF_WIDTH as f64;
    if t.abs() >= half {
        return 0.0;
    }
    let ratio = t / half;
    let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / bessel_i0(KAISER_BETA);
    let sinc = if t == 0.0 {
        1.0
    } else {
        let x = std::f64::consts::PI * t;
        x.sin() / x
    };
    sinc * window
}

/// `out[n] = x(n + start - delay)` by windowed-sinc interpolation, where
/// `x[i]` is `source[i]`. Integer delays reduce to exact shifts.
fn fractional_delay(source: &[f64], start: i64, delay: f64, len: usize) -> Vec<f64> {
    let whole = delay.floor();
    let frac = delay - whole;
    let whole = whole as i64;
    // taps[j] weights x[n - whole + j] with offset t = -frac - j
    let taps: Vec<(i64, f64)> = (-SINC_HALF_WIDTH..SINC_HALF_WIDTH)
        .map(|j| (j, kaiser_sinc(-frac - j as f64)))
        .filter(|(_, w)| *w != 0.0)
        .collect();
    (0..len as i64)
        .map(|n| {
            taps.iter()
                .map(|&(j, w)| {
                    let i = n + start - whole + j;
                    source.get(i as usize).map_or(0.0, |x| w * x)
                })
                .sum()
        })
        .collect()
}

/// Synthesizes free-field recordings of the scene's source.
pub fn synth_signals(
    scene: &Scene,
    model: &SignalModel,
    duration_s: f64,
    sample_rate: f64,
) -> Result<MicSignals> {
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(Error::InvalidFrameConfig(format!(
            "sample rate must be positive, got {sample_rate}"
        )));
    }
    if let Some(snr) = model.snr_db {
        if !snr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "SNR must be finite, got {snr}"
            )));
        }
    }
    let len = (duration_s * sample_rate).round().max(0.0) as usize;
    let frame = FrameConfig::new(sample_rate);
    let needed = frame.frame_length() + frame.hop();
    if len < needed {
        return Err(Error::SignalTooShort { len, needed });
    }
    let distances = scene.distances();
    let delays: Vec<f64> = distances
        .iter()
        .map(|d| d / scene.sound_speed() * sample_rate)
        .collect();
    let max_delay = delays.iter().copied().fold(0.0, f64::max);
    if max_delay >= len as f64 {
        return Err(Error::InvalidConfig(format!(
            "propagation delay of {max_delay:.1} samples exceeds the {len}-sample duration"
        )));
    }

    // Output sample n reads source index n + lead - delay, so the source
    // buffer starts early enough for the longest delay and the kernel.
    let lead = max_delay.ceil() as i64 + SINC_HALF_WIDTH + 1;
    let source_len = len + lead as usize + SINC_HALF_WIDTH as usize + 1;
    let source: Vec<f64> = match &model.source {
        SourceKind::WhiteNoise => {
            let mut rng = rng_from_seed(derive_seed(model.seed, &[0]));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..source_len).map(|_| normal.sample(&mut rng)).collect()
        }
        SourceKind::Samples(samples) => {
            if samples.len() < source_len {
                return Err(Error::SignalTooShort {
                    len: samples.len(),
                    needed: source_len,
                });
            }
            samples[..source_len].to_vec()
        }
    };

    let channels = delays
        .iter()
        .zip(&distances)
        .enumerate()
        .map(|(m, (&delay, &distance))| {
            let gain = model.gain_law.gain(distance);
            let mut y: Vec<f64> = fractional_delay(&source, lead, delay, len)
                .into_iter()
                .map(|v| gain * v)
                .collect();
            if let Some(snr) = model.snr_db {
                let power = y.iter().map(|v| v * v).sum::<f64>() / len as f64;
                let std = (power / 10f64.powf(snr / 10.0)).sqrt();
                if std > 0.0 {
                    let mut rng = rng_from_seed(derive_seed(model.seed, &[1, m as u64]));
                    let normal = Normal::new(0.0, std).expect("finite std");
                    for v in &mut y {
                        *v += normal.sample(&mut rng);
                    }
                }
            }
            y
        })
        .collect();
    MicSignals::new(channels, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{true_rd_full, true_rd_ref, DEFAULT_SOUND_SPEED};
    use crate::tdoa::{self, GccPhat};

    fn p(x: f64, y: f64, z: f64) -> Point {
        Point::new(x, y, z)
    }

    fn scene() -> Scene {
        Scene::new(
            vec![
                p(0.0, 0.0, 0.0),
                p(2.0, 0.0, 0.3),
                p(0.0, 2.0, 0.0),
                p(1.0, 1.0, 2.0),
            ],
            p(0.7, 0.4, 0.5),
            DEFAULT_SOUND_SPEED,
        )
        .unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let rd = true_rd_full(&scene());
        let model = RdNoiseModel::gaussian(0.0, 1);
        assert_eq!(model.perturb_matrix(&rd), rd);
        let v = true_rd_ref(&scene(), 0).unwrap();
        assert_eq!(model.perturb_vector(&v), v);
    }

    #[test]
    fn perturbation_is_reproducible_and_antisymmetric() {
        let rd = true_rd_full(&scene());
        let model = RdNoiseModel::gaussian(0.05, 99);
        let a = model.perturb_matrix(&rd);
        let b = model.perturb_matrix(&rd);
        assert_eq!(a, b);
        assert_ne!(a, model.with_seed(100).perturb_matrix(&rd));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.get(i, j), -a.get(j, i));
            }
        }
    }

    fn empirical_std(model: RdNoiseModel, n: usize) -> f64 {
        let mut rng = rng_from_seed(model.seed);
        let xs: Vec<f64> = (0..n).map(|_| model.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    #[test]
    fn gaussian_and_laplacian_have_requested_std() {
        let g = empirical_std(RdNoiseModel::gaussian(0.1, 5), 100_000);
        assert!((g / 0.1 - 1.0).abs() < 0.02, "gaussian std {g}");
        let l = empirical_std(
            RdNoiseModel {
                kind: NoiseKind::Laplacian,
                sigma: 0.1,
                seed: 6,
            },
            100_000,
        );
        assert!((l / 0.1 - 1.0).abs() < 0.02, "laplacian std {l}");
    }

    #[test]
    fn outlier_mixture_std() {
        // variance = (1 - f) s² + f (k s)²
        let model = RdNoiseModel {
            kind: NoiseKind::OutlierMixture {
                fraction: 0.1,
                scale: 5.0,
            },
            sigma: 0.02,
            seed: 7,
        };
        let expected = (0.9f64 * 0.02 * 0.02 + 0.1 * 0.1 * 0.1).sqrt();
        let s = empirical_std(model, 100_000);
        assert!((s / expected - 1.0).abs() < 0.03, "{s} vs {expected}");
        assert!(RdNoiseModel {
            kind: NoiseKind::OutlierMixture {
                fraction: 1.5,
                scale: 1.0
            },
            sigma: 0.1,
            seed: 0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 1]);
        let b = derive_seed(1, &[1, 0]);
        let c = derive_seed(2, &[0, 1]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(1, &[0, 1]));
    }

    #[test]
    fn kernel_is_exact_for_integer_delays() {
        assert_eq!(kaiser_sinc(0.0), 1.0);
        for k in 1..16 {
            assert!(kaiser_sinc(k as f64).abs() < 1e-15);
        }
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-14);
    }

    #[test]
    fn equidistant_mics_give_identical_channels_up_to_gain() {
        let scene = Scene::new(
            vec![p(1.0, 0.0, 0.0), p(0.0, 1.0, 0.0), p(-2.0, 0.0, 0.0)],
            Point::zeros(),
            DEFAULT_SOUND_SPEED,
        )
        .unwrap();
        let model = SignalModel::white_noise(None, 3);
        let s = synth_signals(&scene, &model, 0.5, 16_000.0).unwrap();
        assert_eq!(s.channels()[0], s.channels()[1]);
        let model = SignalModel {
            gain_law: GainLaw::Unit,
            ..model
        };
        let s = synth_signals(&scene, &model, 0.5, 16_000.0).unwrap();
        assert_eq!(s.channels()[0], s.channels()[1]);
    }

    #[test]
    fn constructed_37_sample_delay() {
        let fs = 16_000.0;
        let c = DEFAULT_SOUND_SPEED;
        let d0 = 1.0;
        let d1 = d0 + c * 37.0 / fs;
        let scene = Scene::new(vec![p(d0, 0.0, 0.0), p(-d1, 0.0, 0.0)], Point::zeros(), c).unwrap();
        let s = synth_signals(&scene, &SignalModel::white_noise(None, 4), 1.0, fs).unwrap();
        let cfg = FrameConfig::new(fs);
        let frames_a = tdoa::frame_signal(&s.channels()[0], &cfg).unwrap();
        let frames_b = tdoa::frame_signal(&s.channels()[1], &cfg).unwrap();
        let g = GccPhat::new(cfg.frame_length());
        for (a, b) in frames_a.iter().zip(&frames_b) {
            assert_eq!(g.lag(a, b, 200, false).unwrap(), 37.0);
        }
    }

    #[test]
    fn correlation_peaks_at_rounded_delay_difference() {
        let fs = 16_000.0;
        let scene = Scene::new(
            vec![
                p(0.0, 0.0, 0.0),
                p(3.0, 0.4, 0.0),
                p(0.5, 2.9, 1.0),
                p(2.0, 2.0, 2.0),
            ],
            p(0.4, 0.3, 0.2),
            DEFAULT_SOUND_SPEED,
        )
        .unwrap();
        let s = synth_signals(&scene, &SignalModel::white_noise(None, 5), 1.0, fs).unwrap();
        let tof = scene.times_of_flight();
        let cfg = FrameConfig::new(fs);
        let g = GccPhat::new(cfg.frame_length());
        let frames: Vec<_> = s
            .channels()
            .iter()
            .map(|c| tdoa::frame_signal(c, &cfg).unwrap())
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                let expected = (fs * (tof[j] - tof[i])).round();
                let lag = g.lag(&frames[i][3], &frames[j][3], 300, false).unwrap();
                assert_eq!(lag, expected, "pair ({i}, {j})");
            }
        }
    }

    #[test]
    fn snr_is_calibrated() {
        let fs = 16_000.0;
        let sc = scene();
        let clean = synth_signals(&sc, &SignalModel::white_noise(None, 8), 1.0, fs).unwrap();
        for snr in [0.0, 10.0, 30.0] {
            let noisy =
                synth_signals(&sc, &SignalModel::white_noise(Some(snr), 8), 1.0, fs).unwrap();
            for (c, n) in clean.channels().iter().zip(noisy.channels()) {
                let ps: f64 = c.iter().map(|v| v * v).sum();
                let pn: f64 = c.iter().zip(n).map(|(a, b)| (b - a).powi(2)).sum();
                let measured = 10.0 * (ps / pn).log10();
                assert!((measured - snr).abs() < 0.5, "{measured} vs {snr}");
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let m = SignalModel::white_noise(Some(20.0), 11);
        let a = synth_signals(&scene(), &m, 0.3, 16_000.0).unwrap();
        let b = synth_signals(&scene(), &m, 0.3, 16_000.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_or_too_distant() {
        let m = SignalModel::white_noise(None, 1);
        assert!(matches!(
            synth_signals(&scene(), &m, 0.05, 16_000.0),
            Err(Error::SignalTooShort { .. })
        ));
        let far = Scene::new(
            vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)],
            p(500.0, 0.0, 0.0),
            DEFAULT_SOUND_SPEED,
        )
        .unwrap();
        assert!(synth_signals(&far, &m, 0.2, 16_000.0).is_err());
        let short = SignalModel {
            source: SourceKind::Samples(vec![0.5; 100]),
            ..m
        };
        assert!(matches!(
            synth_signals(&scene(), &short, 0.2, 16_000.0),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn inverse_distance_gain_favours_nearest_mic() {
        let sc = scene();
        let s =
            synth_signals(&sc, &SignalModel::white_noise(Some(30.0), 2), 1.0, 16_000.0).unwrap();
        let nearest = crate::geometry::argmin_first(sc.distances().into_iter());
        assert_eq!(
            tdoa::select_reference_energy(&s, tdoa::EnergyReference::MaxEnergy),
            nearest
        );
    }

    #[test]
    fn random_scenes_are_well_formed() {
        let bounds = SceneBounds::new(p(-2.0, -2.0, 0.0), p(2.0, 2.0, 2.5)).unwrap();
        let mut rng = rng_from_seed(31);
        for m in 4..=8 {
            let s = random_scene(&mut rng, m, &bounds, DEFAULT_SOUND_SPEED).unwrap();
            assert_eq!(s.mic_count(), m);
            for mic in s.mics() {
                for k in 0..3 {
                    assert!(mic[k] >= bounds.min[k] && mic[k] <= bounds.max[k]);
                }
            }
            assert!(spread(s.mics()) >= 0.05 * bounds.extent());
        }
        assert!(random_scene(&mut rng, 3, &bounds, DEFAULT_SOUND_SPEED).is_err());
        assert!(SceneBounds::new(p(0.0, 0.0, 0.0), p(1.0, 0.0, 1.0)).is_err());
    }
}
