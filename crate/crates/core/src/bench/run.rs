use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use super::config::{BenchmarkConfig, Feature, NoiseSpec};
use crate::denoise::tdoa_average;
use crate::error::{Error, Result};
use crate::geometry::{array_diameter, RdMatrix, Scene, SphericalEstimate, Status};
use crate::parallel::{self, Execution};
use crate::pipeline::{localize, Method, RefPolicy};
use crate::simulate::{derive_seed, synth_signals, SignalModel, SourceKind};
use crate::tdoa::{estimate_tdoa_matrix_with, TdoaMatrix};

/// Outcome of one trial. Failures are recorded, never dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialStatus {
    Solver(Status),
    /// A TDOA pair inside the subset had no usable frames.
    InvalidTdoa,
    /// The estimator rejected its input (e.g. too few microphones).
    Error,
}

impl TrialStatus {
    pub fn is_success(self) -> bool {
        matches!(self, TrialStatus::Solver(s) if s.is_success())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Solver(s) => s.as_str(),
            TrialStatus::InvalidTdoa => "invalid_tdoa",
            TrialStatus::Error => "error",
        }
    }
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "converged" => TrialStatus::Solver(Status::Converged),
            "closed_form" => TrialStatus::Solver(Status::ClosedForm),
            "degenerate" => TrialStatus::Solver(Status::Degenerate),
            "max_iterations" => TrialStatus::Solver(Status::MaxIterations),
            "invalid_tdoa" => TrialStatus::InvalidTdoa,
            "error" => TrialStatus::Error,
            _ => return Err(Error::Parse(format!("unknown status '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub method: Method,
    pub feature: Feature,
    pub subset: Vec<usize>,
    pub noise_level: String,
    pub trial: usize,
    pub status: TrialStatus,
    /// `‖r - r̂‖`; NaN when the estimator produced no position.
    pub position_error_m: f64,
    /// Mean absolute error over the subset's independent RDs; NaN when the
    /// RDs could not be formed.
    pub mean_abs_rd_error_m: f64,
    pub wall_time_s: f64,
    /// Spherical unknowns of srd/usrd estimates. Not persisted.
    pub spherical: Option<SphericalEstimate>,
}

/// Runs every (noise level, trial) cell, in parallel when available.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<Vec<TrialRecord>> {
    run_benchmark_with(config, Execution::default())
}

/// Records come out in canonical order: noise level, trial, subset, feature,
/// method, each in configuration order. Seeds depend only on the cell, so
/// the result does not depend on `execution` or the worker count.
pub fn run_benchmark_with(
    config: &BenchmarkConfig,
    execution: Execution,
) -> Result<Vec<TrialRecord>> {
    let plan = Plan::new(config)?;
    let cells: Vec<(usize, usize)> = (0..config.noise.len())
        .flat_map(|n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let chunks = parallel::map(&cells, execution, |&(n, t)| plan.run_cell(n, t));
    Ok(chunks.into_iter().flatten().collect())
}

enum Observations {
    Rd(RdMatrix),
    Signal {
        /// TDOA matrices with VAD off and on; absent when no feature needs
        /// it or estimation failed.
        tdoa: [Option<TdoaMatrix>; 2],
        energies: Vec<f64>,
    },
    /// Synthesis failed for the whole cell.
    Failed,
}

struct Plan<'a> {
    config: &'a BenchmarkConfig,
    scenes: Vec<Scene>,
    subsets: Vec<Vec<usize>>,
    levels: Vec<String>,
    source_samples: Vec<Option<Vec<f64>>>,
}

impl<'a> Plan<'a> {
    fn new(config: &'a BenchmarkConfig) -> Result<Self> {
        config.validate()?;
        let source_samples = config
            .noise
            .iter()
            .map(|n| match n {
                NoiseSpec::Signal {
                    source_wav: Some(path),
                    sample_rate,
                    ..
                } => crate::io::read_source_wav(path, *sample_rate).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            scenes: config.scenes()?,
            subsets: config.subsets(),
            levels: config.noise.iter().map(NoiseSpec::level).collect(),
            source_samples,
        })
    }

    fn observe(&self, noise: usize, trial: usize, scene: &Scene) -> Observations {
        let seed = derive_seed(self.config.seed, &[noise as u64, trial as u64]);
        let spec = &self.config.noise[noise];
        if let Some(model) = spec.rd_model() {
            let truth = crate::geometry::true_rd_full(scene);
            return Observations::Rd(model.with_seed(seed).perturb_matrix(&truth));
        }
        let NoiseSpec::Signal {
            snr_db,
            duration_s,
            sample_rate,
            gain_law,
            ..
        } = spec
        else {
            unreachable!("non-RD noise is the signal chain")
        };
        let model = SignalModel {
            gain_law: *gain_law,
            snr_db: *snr_db,
            source: self.source_samples[noise]
                .clone()
                .map_or(SourceKind::WhiteNoise, SourceKind::Samples),
            seed,
        };
        let Ok(signals) = synth_signals(scene, &model, *duration_s, *sample_rate) else {
            return Observations::Failed;
        };
        let frame = self.config.frame.frame_config(*sample_rate);
        let diameter = array_diameter(scene.mics());
        let tdoa = [false, true].map(|vad| {
            if !self.config.features.iter().any(|f| f.vad == vad) {
                return None;
            }
            estimate_tdoa_matrix_with(
                &signals,
                &frame,
                self.config.frame.vad(vad),
                Some(diameter),
                self.config.sound_speed,
                Execution::Sequential,
            )
            .ok()
        });
        Observations::Signal {
            tdoa,
            energies: signals.energies(),
        }
    }

    fn run_cell(&self, noise: usize, trial: usize) -> Vec<TrialRecord> {
        let scene = &self.scenes[trial % self.scenes.len()];
        let observations = self.observe(noise, trial, scene);
        let truth = crate::geometry::true_rd_full(scene);
        let mut out = Vec::with_capacity(
            self.subsets.len() * self.config.features.len() * self.config.methods.len(),
        );
        for subset in &self.subsets {
            let mics: Vec<_> = subset.iter().map(|&i| scene.mics()[i]).collect();
            let sub_truth = truth.subset(subset).expect("subset indices are validated");
            for &feature in &self.config.features {
                let record =
                    |method: Method, status, position_error_m, rd_error, wall, spherical| {
                        TrialRecord {
                            method,
                            feature,
                            subset: subset.clone(),
                            noise_level: self.levels[noise].clone(),
                            trial,
                            status,
                            position_error_m,
                            mean_abs_rd_error_m: rd_error,
                            wall_time_s: wall,
                            spherical,
                        }
                    };
                let (observed, energies) = match &observations {
                    Observations::Rd(full) => (full.subset(subset), None),
                    Observations::Signal { tdoa, energies } => {
                        let rd = match &tdoa[feature.vad as usize] {
                            Some(m) => m.to_rd_subset(subset, self.config.sound_speed),
                            None => Err(Error::NoPeak),
                        };
                        (
                            rd,
                            Some(subset.iter().map(|&i| energies[i]).collect::<Vec<_>>()),
                        )
                    }
                    Observations::Failed => (Err(Error::NoPeak), None),
                };
                let observed = match observed {
                    Ok(rd) if feature.denoise => tdoa_average(&rd),
                    Ok(rd) => rd,
                    Err(e) => {
                        let status = match e {
                            Error::InvalidPair(..) | Error::NoPeak => TrialStatus::InvalidTdoa,
                            _ => TrialStatus::Error,
                        };
                        for &method in &self.config.methods {
                            out.push(record(method, status, f64::NAN, f64::NAN, 0.0, None));
                        }
                        continue;
                    }
                };
                let rd_error = observed
                    .mean_abs_difference(&sub_truth)
                    .expect("same subset size");
                for &method in &self.config.methods {
                    let local = match method.reference_policy() {
                        Some(RefPolicy::Index(g)) => match subset.iter().position(|&i| i == g) {
                            Some(l) => method.with_reference(RefPolicy::Index(l)),
                            None => {
                                out.push(record(
                                    method,
                                    TrialStatus::Error,
                                    f64::NAN,
                                    rd_error,
                                    0.0,
                                    None,
                                ));
                                continue;
                            }
                        },
                        _ => method,
                    };
                    let start = Instant::now();
                    let result = localize(local, &observed, &mics, energies.as_deref());
                    let wall = if self.config.record_timing {
                        start.elapsed().as_secs_f64()
                    } else {
                        0.0
                    };
                    out.push(match result {
                        Ok(res) => {
                            let err = (res.position - scene.source()).norm();
                            record(
                                method,
                                TrialStatus::Solver(res.status),
                                if err.is_finite() { err } else { f64::NAN },
                                rd_error,
                                wall,
                                res.diagnostics.spherical,
                            )
                        }
                        Err(_) => {
                            record(method, TrialStatus::Error, f64::NAN, rd_error, wall, None)
                        }
                    });
                }
            }
        }
        out
    }
}
