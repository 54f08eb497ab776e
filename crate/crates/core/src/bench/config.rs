use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{lab_scene, Point, Scene, DEFAULT_SOUND_SPEED};
use crate::pipeline::{Method, RefPolicy};
use crate::simulate::{
    derive_seed, random_scene, rng_from_seed, GainLaw, NoiseKind, RdNoiseModel, SceneBounds,
};
use crate::tdoa::{FrameConfig, Vad, VadRule};

/// Monte Carlo benchmark description, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
    /// Measure estimator wall time. Off by default so that records are
    /// byte-reproducible.
    #[serde(default)]
    pub record_timing: bool,
    pub scene: SceneSource,
    #[serde(default)]
    pub subsets: SubsetSpec,
    pub features: Vec<Feature>,
    pub methods: Vec<Method>,
    pub noise: Vec<NoiseSpec>,
    #[serde(default)]
    pub frame: FrameSpec,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_trials() -> usize {
    1
}

fn default_sound_speed() -> f64 {
    DEFAULT_SOUND_SPEED
}

fn default_bins() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SceneSource {
    /// The lab geometry; trial `t` uses `positions[t % len]`.
    Lab {
        #[serde(default = "all_positions")]
        positions: Vec<usize>,
    },
    /// A pool of `count` random scenes; trial `t` uses scene `t % count`.
    Random {
        count: usize,
        mic_count: usize,
        min: [f64; 3],
        max: [f64; 3],
    },
}

fn all_positions() -> Vec<usize> {
    vec![1, 2, 3]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SubsetSpec {
    #[default]
    Full,
    KOfM {
        k: usize,
    },
}

/// TDOA feature variant: VAD on or off, TDOA averaging on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(try_from = "String")]
pub struct Feature {
    pub vad: bool,
    pub denoise: bool,
}

impl Feature {
    pub const ALL: [Feature; 4] = [
        Feature {
            vad: true,
            denoise: false,
        },
        Feature {
            vad: false,
            denoise: false,
        },
        Feature {
            vad: true,
            denoise: true,
        },
        Feature {
            vad: false,
            denoise: true,
        },
    ];
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vad = if self.vad { "vad" } else { "novad" };
        let denoise = if self.denoise { "denoised" } else { "raw" };
        write!(f, "{vad}-{denoise}")
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Feature::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown feature '{s}'")))
    }
}

impl TryFrom<String> for Feature {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One point of the noise sweep.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gaussian {
        sigma: f64,
        label: Option<String>,
    },
    Laplacian {
        sigma: f64,
        label: Option<String>,
    },
    OutlierMixture {
        sigma: f64,
        fraction: f64,
        scale: f64,
        label: Option<String>,
    },
    /// Full signal chain: synthesis, GCC-PHAT, aggregation.
    Signal {
        snr_db: Option<f64>,
        #[serde(default = "default_duration")]
        duration_s: f64,
        #[serde(default = "default_sample_rate")]
        sample_rate: f64,
        #[serde(default)]
        gain_law: GainLaw,
        /// Mono WAV used as the source signal instead of white noise.
        source_wav: Option<PathBuf>,
        label: Option<String>,
    },
}

fn default_duration() -> f64 {
    1.0
}

fn default_sample_rate() -> f64 {
    16_000.0
}

impl NoiseSpec {
    /// Value of the `noise_level` column: the label if given, else sigma in
    /// meters or the SNR in dB.
    pub fn level(&self) -> String {
        match self {
            NoiseSpec::Gaussian { sigma, label }
            | NoiseSpec::Laplacian { sigma, label }
            | NoiseSpec::OutlierMixture { sigma, label, .. } => {
                label.clone().unwrap_or_else(|| super::format_g9(*sigma))
            }
            NoiseSpec::Signal { snr_db, label, .. } => label.clone().unwrap_or_else(|| {
                snr_db.map_or_else(
                    || "clean".to_string(),
                    |s| format!("snr{}", super::format_g9(s)),
                )
            }),
        }
    }

    /// RD-domain noise model; `None` for the signal chain.
    pub fn rd_model(&self) -> Option<RdNoiseModel> {
        let (kind, sigma) = match *self {
            NoiseSpec::Gaussian { sigma, .. } => (NoiseKind::Gaussian, sigma),
            NoiseSpec::Laplacian { sigma, .. } => (NoiseKind::Laplacian, sigma),
            NoiseSpec::OutlierMixture {
                sigma,
                fraction,
                scale,
                ..
            } => (NoiseKind::OutlierMixture { fraction, scale }, sigma),
            NoiseSpec::Signal { .. } => return None,
        };
        Some(RdNoiseModel {
            kind,
            sigma,
            seed: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    #[serde(default = "default_frame_duration")]
    pub frame_duration: f64,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_true")]
    pub interpolate: bool,
    #[serde(default)]
    pub vad_rule: VadRuleSpec,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            frame_duration: default_frame_duration(),
            overlap: default_overlap(),
            interpolate: true,
            vad_rule: VadRuleSpec::default(),
        }
    }
}

fn default_frame_duration() -> f64 {
    0.064
}

fn default_overlap() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VadRuleSpec {
    #[default]
    SumOfEnergies,
    EnergyOfSum,
}

impl FrameSpec {
    pub fn frame_config(&self, sample_rate: f64) -> FrameConfig {
        FrameConfig {
            frame_duration: self.frame_duration,
            overlap: self.overlap,
            interpolate: self.interpolate,
            ..FrameConfig::new(sample_rate)
        }
    }

    pub fn vad(&self, on: bool) -> Vad {
        match (on, self.vad_rule) {
            (false, _) => Vad::Off,
            (true, VadRuleSpec::SumOfEnergies) => Vad::OnWith(VadRule::SumOfEnergies),
            (true, VadRuleSpec::EnergyOfSum) => Vad::OnWith(VadRule::EnergyOfSum),
        }
    }
}

/// Seed stream tag for the random scene pool.
const SCENE_STREAM: u64 = 0x5CE9E;

impl BenchmarkConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if self.methods.is_empty() {
            return invalid("at least one method is required".into());
        }
        if self.features.is_empty() {
            return invalid("at least one feature is required".into());
        }
        if self.noise.is_empty() {
            return invalid("at least one noise level is required".into());
        }
        if self.trials == 0 {
            return invalid("trials must be positive".into());
        }
        if !(self.sound_speed.is_finite() && self.sound_speed > 0.0) {
            return invalid(format!(
                "sound speed must be positive, got {}",
                self.sound_speed
            ));
        }
        if self.histogram_bins == 0 {
            return invalid("histogram_bins must be positive".into());
        }
        let mut seen = HashSet::new();
        for m in &self.methods {
            if !seen.insert(m.to_string()) {
                return invalid(format!("duplicate method '{m}'"));
            }
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(*f) {
                return invalid(format!("duplicate feature '{f}'"));
            }
        }
        let mut seen = HashSet::new();
        for n in &self.noise {
            if !seen.insert(n.level()) {
                return invalid(format!(
                    "duplicate noise level '{}'; set distinct labels",
                    n.level()
                ));
            }
            if let Some(model) = n.rd_model() {
                model.validate()?;
            }
            if let NoiseSpec::Signal {
                snr_db,
                duration_s,
                sample_rate,
                ..
            } = n
            {
                if snr_db.is_some_and(|s| !s.is_finite()) {
                    return invalid("snr_db must be finite".into());
                }
                if !(duration_s.is_finite() && *duration_s > 0.0) {
                    return invalid(format!("duration_s must be positive, got {duration_s}"));
                }
                self.frame.frame_config(*sample_rate).validate()?;
            }
        }
        let mic_count = match &self.scene {
            SceneSource::Lab { positions } => {
                if positions.is_empty() {
                    return invalid("lab needs at least one position".into());
                }
                if let Some(p) = positions.iter().find(|&&p| !(1..=3).contains(&p)) {
                    return invalid(format!("lab positions are 1..=3, got {p}"));
                }
                lab_scene::mics().len()
            }
            SceneSource::Random {
                count,
                mic_count,
                min,
                max,
            } => {
                if *count == 0 {
                    return invalid("random scene count must be positive".into());
                }
                if *mic_count < 4 {
                    return invalid(format!(
                        "random scenes need at least 4 mics, got {mic_count}"
                    ));
                }
                SceneBounds::new(Point::from(*min), Point::from(*max))?;
                *mic_count
            }
        };
        if let SubsetSpec::KOfM { k } = self.subsets {
            if k == 0 || k > mic_count {
                return invalid(format!("subset size must lie in 1..={mic_count}, got {k}"));
            }
        }
        for m in &self.methods {
            if let Some(RefPolicy::Index(i)) = m.reference_policy() {
                if i >= mic_count {
                    return invalid(format!("{m}: reference index out of range"));
                }
            }
        }
        Ok(())
    }

    /// Scene pool; trial `t` uses `scenes[t % len]`.
    pub fn scenes(&self) -> Result<Vec<Scene>> {
        match &self.scene {
            SceneSource::Lab { positions } => positions
                .iter()
                .map(|&p| lab_scene::scene(p, self.sound_speed))
                .collect(),
            SceneSource::Random {
                count,
                mic_count,
                min,
                max,
            } => {
                let bounds = SceneBounds::new(Point::from(*min), Point::from(*max))?;
                let mut rng = rng_from_seed(derive_seed(self.seed, &[SCENE_STREAM]));
                (0..*count)
                    .map(|_| random_scene(&mut rng, *mic_count, &bounds, self.sound_speed))
                    .collect()
            }
        }
    }

    pub fn mic_count(&self) -> usize {
        match &self.scene {
            SceneSource::Lab { .. } => lab_scene::mics().len(),
            SceneSource::Random { mic_count, .. } => *mic_count,
        }
    }

    pub fn subsets(&self) -> Vec<Vec<usize>> {
        let m = self.mic_count();
        match self.subsets {
            SubsetSpec::Full => vec![(0..m).collect()],
            SubsetSpec::KOfM { k } => super::enumerate_subsets(m, k),
        }
    }

    /// Number of records a run produces.
    pub fn record_count(&self) -> usize {
        self.methods.len()
            * self.features.len()
            * self.subsets().len()
            * self.noise.len()
            * self.trials
    }
}
