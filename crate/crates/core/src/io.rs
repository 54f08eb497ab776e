//! File formats: scene TOML, pairwise matrix CSV and WAV recordings.
//!
//! Matrix CSV files hold one row per line without a header; lines starting
//! with `#` are comments. Entry (m, m') of an RD matrix is
//! `d[m][m'] = D[m'] - D[m]`, the distance to microphone m' minus the
//! distance to microphone m, so a positive value means m' is farther away.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavSpec, WavWriter};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{validate_mics, Point, RdMatrix, Scene, DEFAULT_SOUND_SPEED};
use crate::tdoa::MicSignals;

/// Scene description: microphone positions, optional ground-truth source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub mics: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<[f64; 3]>,
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
}

fn default_sound_speed() -> f64 {
    DEFAULT_SOUND_SPEED
}

impl SceneFile {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            mics: scene.mics().iter().map(|p| [p.x, p.y, p.z]).collect(),
            source: Some([scene.source().x, scene.source().y, scene.source().z]),
            sound_speed: scene.sound_speed(),
        }
    }

    pub fn mic_points(&self) -> Vec<Point> {
        self.mics.iter().map(|&p| Point::from(p)).collect()
    }

    pub fn source_point(&self) -> Option<Point> {
        self.source.map(Point::from)
    }

    /// The full scene, when a source is present.
    pub fn to_scene(&self) -> Result<Option<Scene>> {
        self.source_point()
            .map(|s| Scene::new(self.mic_points(), s, self.sound_speed))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        validate_mics(&self.mic_points())?;
        if !(self.sound_speed.is_finite() && self.sound_speed > 0.0) {
            return Err(Error::InvalidScene(format!(
                "sound speed must be positive, got {}",
                self.sound_speed
            )));
        }
        if let Some(s) = self.source {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("source position"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scene: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    SceneFile::from_toml_str(&std::fs::read_to_string(path)?)
}

pub fn write_scene(path: &Path, scene: &SceneFile) -> Result<()> {
    std::fs::write(path, scene.to_toml_string())?;
    Ok(())
}

/// Parses a square matrix; `nan` entries are allowed.
pub fn parse_matrix_csv(input: impl BufRead) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!("line {}: invalid number '{}'", n + 1, v.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let m = rows.len();
    if m == 0 {
        return Err(Error::Parse("empty matrix".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != m) {
        return Err(Error::Parse(format!(
            "matrix must be square: {m} rows but a row of {} entries",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix_csv(BufReader::new(File::open(path)?))
}

/// Writes a matrix with shortest round-trip float formatting.
pub fn write_matrix_csv(out: &mut impl Write, matrix: &DMatrix<f64>, comment: &str) -> Result<()> {
    for line in comment.lines() {
        writeln!(out, "# {line}")?;
    }
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| {
                let v = matrix[(i, j)];
                if v.is_nan() {
                    "nan".to_string()
                } else {
                    format!("{v:?}")
                }
            })
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub const RD_CSV_COMMENT: &str = "range differences in meters; row m, column m' holds D[m'] - D[m]";
pub const TDOA_CSV_COMMENT: &str = "delays in seconds; row m, column m' holds tau[m'] - tau[m]";

pub fn read_rd_csv(path: &Path) -> Result<RdMatrix> {
    RdMatrix::new(read_matrix_csv(path)?)
}

pub fn write_rd_csv(path: &Path, rd: &RdMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_matrix_csv(&mut out, rd.values(), RD_CSV_COMMENT)?;
    out.flush()?;
    Ok(())
}

/// Deinterleaved samples scaled to [-1, 1], with the file's sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) * scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (format, bits) => {
            return Err(Error::InvalidConfig(format!(
                "{}: unsupported WAV format {format:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let mut out = vec![Vec::with_capacity(interleaved.len() / channels.max(1)); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (c, &v) in frame.iter().enumerate() {
            out[c].push(v);
        }
    }
    Ok((out, spec.sample_rate))
}

/// Loads microphone recordings from one multichannel file or from one mono
/// file per microphone. All files must share a sample rate; channels are cut
/// to the shortest file.
pub fn read_mic_signals(paths: &[PathBuf]) -> Result<MicSignals> {
    let mut channels = Vec::new();
    let mut rate = None;
    for path in paths {
        let (mut data, file_rate) = read_wav(path)?;
        if paths.len() > 1 && data.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{}: expected a mono file per microphone, found {} channels",
                path.display(),
                data.len()
            )));
        }
        match rate {
            None => rate = Some(file_rate),
            Some(r) if r != file_rate => return Err(Error::SampleRateMismatch(r, file_rate)),
            Some(_) => {}
        }
        channels.append(&mut data);
    }
    let Some(rate) = rate else {
        return Err(Error::InvalidConfig("no WAV input given".into()));
    };
    let len = channels.iter().map(Vec::len).min().unwrap_or(0);
    for c in &mut channels {
        c.truncate(len);
    }
    MicSignals::new(channels, f64::from(rate))
}

/// Mono source excerpt at the expected sample rate.
pub fn read_source_wav(path: &Path, sample_rate: f64) -> Result<Vec<f64>> {
    let (mut channels, rate) = read_wav(path)?;
    if channels.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "{}: source WAV must be mono, found {} channels",
            path.display(),
            channels.len()
        )));
    }
    if f64::from(rate) != sample_rate {
        return Err(Error::SampleRateMismatch(sample_rate.round() as u32, rate));
    }
    Ok(channels.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

/// Writes all channels into one interleaved file. PCM output is clipped to
/// the representable range.
pub fn write_wav(path: &Path, signals: &MicSignals, format: WavFormat) -> Result<()> {
    let sample_rate = signals.sample_rate();
    if sample_rate.fract() != 0.0 || sample_rate > f64::from(u32::MAX) {
        return Err(Error::InvalidConfig(format!(
            "WAV needs an integral sample rate, got {sample_rate}"
        )));
    }
    let channels = u16::try_from(signals.channel_count())
        .map_err(|_| Error::InvalidConfig("too many channels for WAV".into()))?;
    let spec = WavSpec {
        channels,
        sample_rate: sample_rate as u32,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for n in 0..signals.len() {
        for ch in signals.channels() {
            match format {
                WavFormat::Pcm16 => {
                    let v = (ch[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(v)?;
                }
                WavFormat::Float32 => writer.write_sample(ch[n] as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{lab_scene, true_rd_full};

    #[test]
    fn scene_round_trip() {
        let scene = lab_scene::scene(2, 340.0).unwrap();
        let file = SceneFile::from_scene(&scene);
        let back = SceneFile::from_toml_str(&file.to_toml_string()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_scene().unwrap().unwrap(), scene);
    }

    #[test]
    fn scene_defaults_and_errors() {
        let s = SceneFile::from_toml_str("mics = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]\n").unwrap();
        assert_eq!(s.sound_speed, DEFAULT_SOUND_SPEED);
        assert!(s.to_scene().unwrap().is_none());
        assert!(SceneFile::from_toml_str("mics = [[0.0, 0.0, 0.0]]").is_err());
        assert!(SceneFile::from_toml_str("mics = [[0.0, 0.0]]").is_err());
        assert!(SceneFile::from_toml_str("mic = []").is_err());
        assert!(SceneFile::from_toml_str(
            "mics = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]\nsound_speed = -1.0"
        )
        .is_err());
    }

    #[test]
    fn rd_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rd.csv");
        let rd = true_rd_full(&lab_scene::scene(1, 343.0).unwrap());
        write_rd_csv(&path, &rd).unwrap();
        assert_eq!(read_rd_csv(&path).unwrap(), rd);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# "));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn matrix_csv_errors() {
        assert!(parse_matrix_csv("".as_bytes()).is_err());
        assert!(parse_matrix_csv("0,1\n-1\n".as_bytes()).is_err());
        assert!(parse_matrix_csv("0,x\n1,0\n".as_bytes()).is_err());
        let m = parse_matrix_csv("# c\n0, nan\nnan,0\n".as_bytes()).unwrap();
        assert!(m[(0, 1)].is_nan());
    }

    fn signals() -> MicSignals {
        let ch = |k: f64| {
            (0..2000)
                .map(|n| (0.01 * k * n as f64).sin() * 0.5)
                .collect()
        };
        MicSignals::new(vec![ch(1.0), ch(2.0), ch(3.0)], 16_000.0).unwrap()
    }

    #[test]
    fn wav_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = signals();
        let float_path = dir.path().join("f.wav");
        write_wav(&float_path, &s, WavFormat::Float32).unwrap();
        let back = read_mic_signals(&[float_path]).unwrap();
        assert_eq!(back.channel_count(), 3);
        for (a, b) in s.channels().iter().zip(back.channels()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-7);
            }
        }
        let pcm_path = dir.path().join("p.wav");
        write_wav(&pcm_path, &s, WavFormat::Pcm16).unwrap();
        let back = read_mic_signals(&[pcm_path]).unwrap();
        for (a, b) in s.channels().iter().zip(back.channels()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1.0 / 32768.0);
            }
        }
    }

    #[test]
    fn mono_files_and_rate_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let s = signals();
        let mut paths = Vec::new();
        for (i, ch) in s.channels().iter().enumerate() {
            let p = dir.path().join(format!("m{i}.wav"));
            write_wav(
                &p,
                &MicSignals::new(vec![ch.clone()], 16_000.0).unwrap(),
                WavFormat::Pcm16,
            )
            .unwrap();
            paths.push(p);
        }
        assert_eq!(read_mic_signals(&paths).unwrap().channel_count(), 3);
        let odd = dir.path().join("odd.wav");
        write_wav(
            &odd,
            &MicSignals::new(vec![s.channels()[0].clone()], 8_000.0).unwrap(),
            WavFormat::Pcm16,
        )
        .unwrap();
        paths.push(odd.clone());
        assert!(matches!(
            read_mic_signals(&paths),
            Err(Error::SampleRateMismatch(16_000, 8_000))
        ));
        assert!(matches!(
            read_source_wav(&odd, 16_000.0),
            Err(Error::SampleRateMismatch(16_000, 8_000))
        ));
        assert_eq!(read_source_wav(&odd, 8_000.0).unwrap().len(), 2000);
        let stereo = dir.path().join("stereo.wav");
        write_wav(&stereo, &s, WavFormat::Pcm16).unwrap();
        assert!(read_mic_signals(&[paths[0].clone(), stereo]).is_err());
    }
}
