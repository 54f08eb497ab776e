//! Signal front-end: framing, GCC-PHAT delay estimation, energy VAD and
//! median aggregation into a pairwise TDOA matrix.

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::{argmax_first, argmin_first, RdMatrix};
use crate::parallel::{self, Execution};

/// Spectral bins with magnitude below this are zeroed by PHAT weighting.
const PHAT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub sample_rate: f64,
    /// Frame duration in seconds.
    pub frame_duration: f64,
    /// Fraction of a frame shared with the next one.
    pub overlap: f64,
    pub window: Window,
    /// Refine integer correlation peaks with a three-point parabola.
    pub interpolate: bool,
}

impl FrameConfig {
    pub fn new(sample_rate: f64) -> Self {
        Self {
            sample_rate,
            frame_duration: 0.064,
            overlap: 0.5,
            window: Window::Hann,
            interpolate: true,
        }
    }

    pub fn frame_length(&self) -> usize {
        (self.frame_duration * self.sample_rate).round() as usize
    }

    pub fn hop(&self) -> usize {
        ((self.frame_length() as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::InvalidFrameConfig(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidFrameConfig(format!(
                "overlap must lie in [0, 1), got {}",
                self.overlap
            )));
        }
        if !self.frame_duration.is_finite() || self.frame_length() < 2 {
            return Err(Error::InvalidFrameConfig(format!(
                "frame of {} s is shorter than 2 samples",
                self.frame_duration
            )));
        }
        Ok(())
    }

    pub fn window(&self, len: usize) -> Vec<f64> {
        match self.window {
            Window::Hann => hann(len),
        }
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Splits a channel into windowed, overlapping frames. A trailing partial
/// frame is dropped.
pub fn frame_signal(channel: &[f64], config: &FrameConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let len = config.frame_length();
    if channel.len() < len {
        return Err(Error::SignalTooShort {
            len: channel.len(),
            needed: len,
        });
    }
    let window = config.window(len);
    let hop = config.hop();
    let count = (channel.len() - len) / hop + 1;
    Ok((0..count)
        .map(|k| {
            channel[k * hop..k * hop + len]
                .iter()
                .zip(&window)
                .map(|(x, w)| x * w)
                .collect()
        })
        .collect())
}

/// Precomputed transforms for GCC-PHAT on frames of one length.
#[derive(Clone)]
pub struct GccPhat {
    frame_len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GccPhat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GccPhat")
            .field("frame_len", &self.frame_len)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl GccPhat {
    pub fn new(frame_len: usize) -> Self {
        // Zero padding to twice the frame length keeps linear lags up to
        // frame_len - 1 free of circular aliasing.
        let fft_len = (2 * frame_len).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            frame_len,
            fft_len,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }
    }

    pub fn spectrum(&self, frame: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(self.fft_len, Complex::new(0.0, 0.0));
        self.forward.process(&mut buf);
        buf
    }

    /// PHAT-weighted cross-correlation, indexed by lag modulo the FFT size.
    pub fn correlation(&self, spec_a: &[Complex<f64>], spec_b: &[Complex<f64>]) -> Vec<f64> {
        let mut cross: Vec<Complex<f64>> = spec_a
            .iter()
            .zip(spec_b)
            .map(|(a, b)| {
                let c = a.conj() * b;
                let mag = c.norm();
                if mag < PHAT_FLOOR {
                    Complex::new(0.0, 0.0)
                } else {
                    c / mag
                }
            })
            .collect();
        self.inverse.process(&mut cross);
        let scale = 1.0 / self.fft_len as f64;
        cross.into_iter().map(|c| c.re * scale).collect()
    }

    /// Lag of `b` relative to `a` in samples; positive when `b` is delayed.
    pub fn lag_from_spectra(
        &self,
        spec_a: &[Complex<f64>],
        spec_b: &[Complex<f64>],
        max_lag: usize,
        interpolate: bool,
    ) -> Result<f64> {
        let corr = self.correlation(spec_a, spec_b);
        let n = self.fft_len as isize;
        let at = |lag: isize| corr[lag.rem_euclid(n) as usize].abs();
        let max_lag = max_lag as isize;
        let mut best = (0isize, -1.0f64);
        for lag in -max_lag..=max_lag {
            let v = at(lag);
            if v > best.1 {
                best = (lag, v);
            }
        }
        if best.1.is_nan() || best.1 <= 0.0 {
            return Err(Error::NoPeak);
        }
        let (peak, y0) = best;
        if !interpolate {
            return Ok(peak as f64);
        }
        let (ym, yp) = (at(peak - 1), at(peak + 1));
        let denom = ym - 2.0 * y0 + yp;
        let offset = if denom < 0.0 {
            (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        Ok(peak as f64 + offset)
    }

    pub fn lag(&self, a: &[f64], b: &[f64], max_lag: usize, interpolate: bool) -> Result<f64> {
        if a.len() != b.len() || a.len() != self.frame_len {
            return Err(Error::DimensionMismatch(format!(
                "frames of {} and {} samples for a {}-sample transform",
                a.len(),
                b.len(),
                self.frame_len
            )));
        }
        if max_lag == 0 || max_lag >= self.frame_len {
            return Err(Error::InvalidFrameConfig(format!(
                "max lag {max_lag} must lie in [1, {})",
                self.frame_len
            )));
        }
        self.lag_from_spectra(&self.spectrum(a), &self.spectrum(b), max_lag, interpolate)
    }
}

/// GCC-PHAT lag between two equal-length frames, with parabolic refinement.
pub fn gcc_phat_pair(frame_a: &[f64], frame_b: &[f64], max_lag: usize) -> Result<f64> {
    GccPhat::new(frame_a.len()).lag(frame_a, frame_b, max_lag, true)
}

pub fn frame_energy(frame: &[f64]) -> f64 {
    frame.iter().map(|x| x * x).sum()
}

/// Keeps a frame pair if either frame's energy exceeds half the pair's
/// median energy.
pub fn energy_vad(frame_a: &[f64], frame_b: &[f64], pair_median_energy: f64) -> bool {
    let threshold = 0.5 * pair_median_energy;
    frame_energy(frame_a) > threshold || frame_energy(frame_b) > threshold
}

/// How the per-pair median energy is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VadRule {
    /// Median over frames of `E(a_i) + E(b_i)`.
    #[default]
    SumOfEnergies,
    /// Median over frames of `E(a_i + b_i)`.
    EnergyOfSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Vad {
    Off,
    #[default]
    On,
    OnWith(VadRule),
}

impl Vad {
    fn rule(self) -> Option<VadRule> {
        match self {
            Vad::Off => None,
            Vad::On => Some(VadRule::default()),
            Vad::OnWith(rule) => Some(rule),
        }
    }
}

/// Median; even-length input averages the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Equal-length microphone recordings.
#[derive(Debug, Clone, PartialEq)]
pub struct MicSignals {
    channels: Vec<Vec<f64>>,
    sample_rate: f64,
}

impl MicSignals {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: f64) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::DimensionMismatch("no channels".into()));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidFrameConfig(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        let len = channels[0].len();
        if let Some(bad) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::DimensionMismatch(format!(
                "channel {bad} has {} samples, channel 0 has {len}",
                channels[bad].len()
            )));
        }
        if !channels.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("signal"));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn energies(&self) -> Vec<f64> {
        self.channels.iter().map(|c| frame_energy(c)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<MicSignals> {
        let channels = indices
            .iter()
            .map(|&i| {
                self.channels.get(i).cloned().ok_or(Error::IndexOutOfRange {
                    index: i,
                    count: self.channels.len(),
                })
            })
            .collect::<Result<_>>()?;
        MicSignals::new(channels, self.sample_rate)
    }
}

/// Pairwise delays in seconds: entry `(m, m')` is `τ[m'] - τ[m]`. Pairs
/// without surviving frames hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaMatrix {
    pub values: DMatrix<f64>,
    pub frame_count_used: DMatrix<usize>,
}

impl TdoaMatrix {
    pub fn mic_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_valid(&self, m: usize, m_prime: usize) -> bool {
        self.values[(m, m_prime)].is_finite()
    }

    pub fn invalid_pairs(&self) -> Vec<(usize, usize)> {
        let m = self.mic_count();
        (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .filter(|&(i, j)| !self.is_valid(i, j))
            .collect()
    }

    /// Range differences in meters over the given microphones.
    pub fn to_rd_subset(&self, indices: &[usize], sound_speed: f64) -> Result<RdMatrix> {
        let m = self.mic_count();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                count: m,
            });
        }
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                if !self.is_valid(i, j) {
                    return Err(Error::InvalidPair(i.min(j), i.max(j)));
                }
            }
        }
        Ok(RdMatrix::from_upper(indices.len(), |a, b| {
            crate::geometry::tdoa_to_rd(self.values[(indices[a], indices[b])], sound_speed)
        }))
    }

    pub fn to_rd(&self, sound_speed: f64) -> Result<RdMatrix> {
        let all: Vec<usize> = (0..self.mic_count()).collect();
        self.to_rd_subset(&all, sound_speed)
    }
}

struct FramedChannel {
    frames: Vec<Vec<f64>>,
    spectra: Vec<Vec<Complex<f64>>>,
    energies: Vec<f64>,
}

/// Maximum physically meaningful lag in samples for an inter-microphone
/// distance.
pub fn max_lag_samples(max_distance_m: f64, sound_speed: f64, sample_rate: f64) -> usize {
    (max_distance_m / sound_speed * sample_rate).ceil().max(0.0) as usize
}

/// Median-aggregated GCC-PHAT delays for every microphone pair. Lags are
/// searched within the travel time over `max_distance_m` (the array
/// diameter); `None` searches every lag shorter than a frame.
pub fn estimate_tdoa_matrix(
    signals: &MicSignals,
    config: &FrameConfig,
    vad: Vad,
    max_distance_m: Option<f64>,
    sound_speed: f64,
) -> Result<TdoaMatrix> {
    estimate_tdoa_matrix_with(
        signals,
        config,
        vad,
        max_distance_m,
        sound_speed,
        Execution::default(),
    )
}

pub fn estimate_tdoa_matrix_with(
    signals: &MicSignals,
    config: &FrameConfig,
    vad: Vad,
    max_distance_m: Option<f64>,
    sound_speed: f64,
    execution: Execution,
) -> Result<TdoaMatrix> {
    let m = signals.channel_count();
    if m < 2 {
        return Err(Error::InsufficientMicrophones {
            method: "tdoa",
            needed: 2,
            got: m,
        });
    }
    let config = FrameConfig {
        sample_rate: signals.sample_rate(),
        ..config.clone()
    };
    config.validate()?;
    let frame_len = config.frame_length();
    let max_lag = match max_distance_m {
        Some(d) => max_lag_samples(d, sound_speed, config.sample_rate).max(1),
        None => frame_len - 1,
    };
    if max_lag >= frame_len {
        return Err(Error::InvalidFrameConfig(format!(
            "max lag of {max_lag} samples does not fit a {frame_len}-sample frame"
        )));
    }

    let gcc = GccPhat::new(frame_len);
    let framed = parallel::map(signals.channels(), execution, |ch| {
        frame_signal(ch, &config).map(|frames| FramedChannel {
            spectra: frames.iter().map(|f| gcc.spectrum(f)).collect(),
            energies: frames.iter().map(|f| frame_energy(f)).collect(),
            frames,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect();
    let per_pair = parallel::map(&pairs, execution, |&(i, j)| {
        let (a, b) = (&framed[i], &framed[j]);
        let count = a.frames.len();
        let keep: Vec<bool> = match vad.rule() {
            None => vec![true; count],
            Some(rule) => {
                let mut pooled: Vec<f64> = (0..count)
                    .map(|k| match rule {
                        VadRule::SumOfEnergies => a.energies[k] + b.energies[k],
                        VadRule::EnergyOfSum => a.frames[k]
                            .iter()
                            .zip(&b.frames[k])
                            .map(|(x, y)| (x + y) * (x + y))
                            .sum(),
                    })
                    .collect();
                let med = median(&mut pooled).unwrap_or(0.0);
                let threshold = 0.5 * med;
                (0..count)
                    .map(|k| a.energies[k] > threshold || b.energies[k] > threshold)
                    .collect()
            }
        };
        let mut lags: Vec<f64> = (0..count)
            .filter(|&k| keep[k])
            .filter_map(|k| {
                gcc.lag_from_spectra(&a.spectra[k], &b.spectra[k], max_lag, config.interpolate)
                    .ok()
            })
            .collect();
        let used = lags.len();
        (median(&mut lags), used)
    });

    let mut values = DMatrix::zeros(m, m);
    let mut frame_count_used = DMatrix::zeros(m, m);
    for (&(i, j), (lag, used)) in pairs.iter().zip(per_pair) {
        let tau = lag.map_or(f64::NAN, |l| l / config.sample_rate);
        values[(i, j)] = tau;
        values[(j, i)] = -tau;
        frame_count_used[(i, j)] = used;
        frame_count_used[(j, i)] = used;
    }
    Ok(TdoaMatrix {
        values,
        frame_count_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyReference {
    MaxEnergy,
    MinEnergy,
}

/// Microphone with the highest or lowest recording energy; ties resolve to
/// the lowest index.
pub fn select_reference_energy(signals: &MicSignals, policy: EnergyReference) -> usize {
    select_by_energy(&signals.energies(), policy)
}

pub(crate) fn select_by_energy(energies: &[f64], policy: EnergyReference) -> usize {
    match policy {
        EnergyReference::MaxEnergy => argmax_first(energies.iter().copied()),
        EnergyReference::MinEnergy => argmin_first(energies.iter().copied()),
    }
}
