//! `multilat`: command-line front end for the localization toolkit.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multilat::bench::{
    histogram, run_benchmark_with, summarize, write_histogram, write_records, write_summary,
    BenchmarkConfig,
};
use multilat::denoise::tdoa_average;
use multilat::geometry::{array_diameter, lab_scene, true_rd_full, Point, RdMatrix};
use multilat::io::{
    read_mic_signals, read_rd_csv, read_scene, write_matrix_csv, write_rd_csv, write_scene,
    write_wav, SceneFile, WavFormat, TDOA_CSV_COMMENT,
};
use multilat::parallel::{self, Execution};
use multilat::pipeline::{localize, Method, RefPolicy};
use multilat::simulate::{synth_signals, GainLaw, RdNoiseModel, SignalModel};
use multilat::tdoa::{estimate_tdoa_matrix, FrameConfig, MicSignals, TdoaMatrix, Vad, VadRule};
use multilat::Error;

const RD_HELP: &str = "RD CSV files hold one matrix row per line. Entry (m, m') is \
d[m][m'] = D[m'] - D[m]: the distance from the source to microphone m' minus the \
distance to microphone m. Lines starting with '#' are comments.";

const EXIT_HELP: &str = "Exit status: 0 on success, 2 on configuration or parse errors, \
3 on degenerate results or too few microphones. Failures also print one line \
`error code=<n> kind=<kind> message=\"...\"` on standard error. MULTILAT_THREADS caps \
the worker count (0 = automatic).";

#[derive(Parser)]
#[command(
    name = "multilat",
    version,
    about = "Sound source localization from range differences"
)]
#[command(after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the source position from an RD matrix or from recordings.
    #[command(after_help = RD_HELP)]
    Localize(LocalizeArgs),
    /// Run a Monte Carlo benchmark described by a TOML file.
    Bench(BenchArgs),
    /// Estimate pairwise delays from recordings.
    #[command(after_help = RD_HELP)]
    Tdoa(TdoaArgs),
    /// Synthesize free-field recordings of a scene.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodName {
    UsrdLs,
    SrdLs,
    Conic,
    ConicNorm,
    Hyperbolic,
}

#[derive(Clone, Copy, ValueEnum)]
enum VadRuleArg {
    SumOfEnergies,
    EnergyOfSum,
}

#[derive(Args)]
struct FrameArgs {
    /// Frame duration in seconds.
    #[arg(long, default_value_t = 0.064)]
    frame_duration: f64,
    /// Fraction of a frame shared with the next one.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Keep integer correlation lags.
    #[arg(long)]
    no_interp: bool,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    vad: Switch,
    #[arg(long, value_enum, default_value_t = VadRuleArg::SumOfEnergies)]
    vad_rule: VadRuleArg,
}

impl FrameArgs {
    fn frame_config(&self, sample_rate: f64) -> FrameConfig {
        FrameConfig {
            frame_duration: self.frame_duration,
            overlap: self.overlap,
            interpolate: !self.no_interp,
            ..FrameConfig::new(sample_rate)
        }
    }

    fn vad(&self) -> Vad {
        match (self.vad, self.vad_rule) {
            (Switch::Off, _) => Vad::Off,
            (Switch::On, VadRuleArg::SumOfEnergies) => Vad::OnWith(VadRule::SumOfEnergies),
            (Switch::On, VadRuleArg::EnergyOfSum) => Vad::OnWith(VadRule::EnergyOfSum),
        }
    }
}

#[derive(Args)]
struct LocalizeArgs {
    /// Scene TOML with microphone positions and an optional true source.
    #[arg(long)]
    scene: PathBuf,
    /// RD matrix CSV in meters.
    #[arg(long, conflicts_with = "wav", required_unless_present = "wav")]
    rd: Option<PathBuf>,
    /// One multichannel WAV or one mono WAV per microphone.
    #[arg(long, num_args = 1..)]
    wav: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodName::SrdLs)]
    method: MethodName,
    /// Reference microphone policy; ignored by the conic methods.
    #[arg(long = "ref", default_value = "nearest-barycenter")]
    reference: RefPolicyArg,
    /// Replace the RDs by the closest consistent set first.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    denoise: Switch,
    /// Overrides the scene's speed of sound (m/s).
    #[arg(long)]
    sound_speed: Option<f64>,
    /// Standard deviation (m) of Gaussian noise added to the RDs.
    #[arg(long, default_value_t = 0.0)]
    rd_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    frame: FrameArgs,
}

#[derive(Clone, Copy)]
struct RefPolicyArg(RefPolicy);

impl std::str::FromStr for RefPolicyArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse()
            .map(RefPolicyArg)
            .map_err(|e: Error| e.to_string())
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark TOML file.
    config: PathBuf,
    /// Output directory for records.csv, summary.csv and histogram.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TdoaArgs {
    /// One multichannel WAV or one mono WAV per microphone.
    #[arg(long, num_args = 1.., required = true)]
    wav: Vec<PathBuf>,
    /// Output directory for tdoa.csv (seconds) and rd.csv (meters).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = multilat::geometry::DEFAULT_SOUND_SPEED)]
    sound_speed: f64,
    /// Bound the lag search by the travel time over this distance (m).
    #[arg(long, conflicts_with = "scene")]
    max_distance: Option<f64>,
    /// Bound the lag search by the scene's array diameter.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[command(flatten)]
    frame: FrameArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Float32,
    Pcm16,
}

#[derive(Clone, Copy, ValueEnum)]
enum GainArg {
    InverseDistance,
    Unit,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene TOML; it must contain a source.
    #[arg(
        long,
        required_unless_present = "lab_position",
        conflicts_with = "lab_position"
    )]
    scene: Option<PathBuf>,
    /// Use the built-in eight-microphone lab scene with source 1, 2 or 3.
    #[arg(long)]
    lab_position: Option<usize>,
    /// Multichannel WAV output.
    #[arg(long)]
    out: PathBuf,
    /// Also write the scene as TOML.
    #[arg(long)]
    scene_out: Option<PathBuf>,
    /// Also write the exact RD matrix as CSV.
    #[arg(long)]
    rd_out: Option<PathBuf>,
    /// Per-channel SNR in dB; noiseless when absent.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long, value_enum, default_value_t = GainArg::InverseDistance)]
    gain: GainArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Float32)]
    format: FormatArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failed command: exit status plus the machine-readable error line.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config",
            message: message.into(),
        }
    }

    fn degenerate(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            kind: "degenerate",
            message: message.into(),
        }
    }

    fn at(path: &Path, err: Error) -> Self {
        let mut failure = Failure::from(err);
        failure.message = format!("{}: {}", path.display(), failure.message);
        failure
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "error code={} kind={} message={:?}",
            self.code, self.kind, self.message
        )
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let (code, kind) = match &err {
            Error::InsufficientMicrophones { .. } => (3, "insufficient-microphones"),
            Error::InvalidPair(..) => (3, "invalid-tdoa"),
            Error::NoPeak => (3, "no-peak"),
            Error::InvalidScene(_) => (2, "invalid-scene"),
            Error::IndexOutOfRange { .. } => (2, "index-out-of-range"),
            Error::DimensionMismatch(_) => (2, "dimension-mismatch"),
            Error::NotAntisymmetric { .. } => (2, "not-antisymmetric"),
            Error::NonFinite(_) => (2, "non-finite"),
            Error::InvalidCovariance(_) => (2, "invalid-covariance"),
            Error::SignalTooShort { .. } => (2, "signal-too-short"),
            Error::InvalidFrameConfig(_) => (2, "invalid-frame-config"),
            Error::SampleRateMismatch(..) => (2, "sample-rate-mismatch"),
            Error::InvalidConfig(_) => (2, "invalid-config"),
            Error::Parse(_) => (2, "parse"),
            Error::Wav(_) => (2, "wav"),
            Error::Io(_) => (2, "io"),
        };
        Self {
            code,
            kind,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if !err.use_stderr() => {
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            let _ = err.print();
            let first = err.to_string();
            let first = first.lines().next().unwrap_or_default();
            return fail(&Failure {
                code: 2,
                kind: "usage",
                message: first.trim_start_matches("error: ").to_string(),
            });
        }
    };
    let threads = match thread_limit() {
        Ok(n) => n,
        Err(failure) => return fail(&failure),
    };
    let outcome = parallel::with_threads(threads, || match cli.command {
        Command::Localize(args) => cmd_localize(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Tdoa(args) => cmd_tdoa(&args),
        Command::Synth(args) => cmd_synth(&args),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => fail(&failure),
    }
}

fn fail(failure: &Failure) -> ExitCode {
    eprintln!("{failure}");
    ExitCode::from(failure.code)
}

fn thread_limit() -> Result<usize, Failure> {
    match std::env::var("MULTILAT_THREADS") {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("MULTILAT_THREADS must be a count, got '{v}'"))),
    }
}

fn load_scene(path: &Path) -> Result<SceneFile, Failure> {
    read_scene(path).map_err(|e| Failure::at(path, e))
}

fn positive(name: &str, v: f64) -> CmdResult {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Failure::config(format!("{name} must be positive, got {v}")))
    }
}

fn fmt_point(p: &Point) -> String {
    format!("{} {} {}", p.x, p.y, p.z)
}

fn read_signals(paths: &[PathBuf]) -> Result<MicSignals, Failure> {
    let signals = read_mic_signals(paths)?;
    if signals.channel_count() < 2 {
        return Err(Failure::config(format!(
            "need at least 2 channels, got {}",
            signals.channel_count()
        )));
    }
    Ok(signals)
}

fn cmd_localize(args: &LocalizeArgs) -> CmdResult {
    let scene = load_scene(&args.scene)?;
    let mics = scene.mic_points();
    let sound_speed = args.sound_speed.unwrap_or(scene.sound_speed);
    positive("sound speed", sound_speed)?;
    if !(args.rd_noise.is_finite() && args.rd_noise >= 0.0) {
        return Err(Failure::config(format!(
            "RD noise must be non-negative, got {}",
            args.rd_noise
        )));
    }

    let (mut rd, energies) = match &args.rd {
        Some(path) => (read_rd_csv(path).map_err(|e| Failure::at(path, e))?, None),
        None => {
            let signals = read_signals(&args.wav)?;
            if signals.channel_count() != mics.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} channels for {} microphones",
                    signals.channel_count(),
                    mics.len()
                ))
                .into());
            }
            let frame = args.frame.frame_config(signals.sample_rate());
            let tdoa = estimate_tdoa_matrix(
                &signals,
                &frame,
                args.frame.vad(),
                Some(array_diameter(&mics)),
                sound_speed,
            )?;
            (tdoa.to_rd(sound_speed)?, Some(signals.energies()))
        }
    };
    if rd.mic_count() != mics.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} RD matrix for {} microphones",
            rd.mic_count(),
            rd.mic_count(),
            mics.len()
        ))
        .into());
    }
    if args.rd_noise > 0.0 {
        rd = RdNoiseModel::gaussian(args.rd_noise, args.seed).perturb_matrix(&rd);
    }
    if args.denoise == Switch::On {
        rd = tdoa_average(&rd);
    }

    let policy = args.reference.0;
    let method = match args.method {
        MethodName::UsrdLs => Method::UsrdLs(policy),
        MethodName::SrdLs => Method::SrdLs(policy),
        MethodName::Conic => Method::Conic,
        MethodName::ConicNorm => Method::ConicNorm,
        MethodName::Hyperbolic => Method::Hyperbolic(policy),
    };
    let result = localize(method, &rd, &mics, energies.as_deref())?;

    println!("method: {method}");
    println!("status: {}", result.status);
    println!("position: {}", fmt_point(&result.position));
    println!("residual: {}", result.residual);
    if let Some(truth) = scene.source_point() {
        println!("position_error_m: {}", (result.position - truth).norm());
    }
    if !result.status.is_success() {
        return Err(Failure::degenerate(format!(
            "{method} finished with status {}",
            result.status
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::at(path, e.into()))
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    let mut config =
        BenchmarkConfig::load(&args.config).map_err(|e| Failure::at(&args.config, e))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let execution = if args.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    fs::create_dir_all(&args.out).map_err(|e| Failure::at(&args.out, e.into()))?;

    let start = Instant::now();
    let records = run_benchmark_with(&config, execution)?;
    let elapsed = start.elapsed().as_secs_f64();

    let path = args.out.join("records.csv");
    let mut out = create(&path)?;
    write_records(&mut out, &records)?;
    out.flush()?;

    let path = args.out.join("summary.csv");
    let mut out = create(&path)?;
    write_summary(&mut out, &summarize(&records))?;
    out.flush()?;

    let path = args.out.join("histogram.csv");
    let mut out = create(&path)?;
    write_histogram(&mut out, &histogram(&records, config.histogram_bins))?;
    out.flush()?;

    let failures = records.iter().filter(|r| !r.status.is_success()).count();
    println!("cells: {}", records.len());
    println!("failures: {failures}");
    println!("elapsed_s: {elapsed:.3}");
    println!("output: {}", args.out.display());
    Ok(())
}

fn cmd_tdoa(args: &TdoaArgs) -> CmdResult {
    positive("sound speed", args.sound_speed)?;
    let signals = read_signals(&args.wav)?;
    let max_distance = match (&args.scene, args.max_distance) {
        (Some(path), _) => {
            let scene = load_scene(path)?;
            if scene.mics.len() != signals.channel_count() {
                return Err(Error::DimensionMismatch(format!(
                    "{} channels for {} microphones",
                    signals.channel_count(),
                    scene.mics.len()
                ))
                .into());
            }
            Some(array_diameter(&scene.mic_points()))
        }
        (None, Some(d)) => {
            positive("max distance", d)?;
            Some(d)
        }
        (None, None) => None,
    };
    let frame = args.frame.frame_config(signals.sample_rate());
    let tdoa = estimate_tdoa_matrix(
        &signals,
        &frame,
        args.frame.vad(),
        max_distance,
        args.sound_speed,
    )?;

    fs::create_dir_all(&args.out).map_err(|e| Failure::at(&args.out, e.into()))?;
    let path = args.out.join("tdoa.csv");
    let mut out = create(&path)?;
    write_matrix_csv(&mut out, &tdoa.values, TDOA_CSV_COMMENT)?;
    out.flush()?;
    println!("mics: {}", tdoa.mic_count());
    println!("tdoa: {}", path.display());

    report_invalid(&tdoa)?;
    let path = args.out.join("rd.csv");
    write_rd_csv(&path, &tdoa.to_rd(args.sound_speed)?).map_err(|e| Failure::at(&path, e))?;
    println!("rd: {}", path.display());
    Ok(())
}

fn report_invalid(tdoa: &TdoaMatrix) -> CmdResult {
    let invalid = tdoa.invalid_pairs();
    if invalid.is_empty() {
        return Ok(());
    }
    let pairs: Vec<String> = invalid.iter().map(|(a, b)| format!("({a},{b})")).collect();
    Err(Failure {
        code: 3,
        kind: "invalid-tdoa",
        message: format!("no frames survived for pairs {}", pairs.join(" ")),
    })
}

fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let file = match (&args.scene, args.lab_position) {
        (Some(path), _) => load_scene(path)?,
        (None, Some(position)) => SceneFile::from_scene(&lab_scene::scene(
            position,
            multilat::geometry::DEFAULT_SOUND_SPEED,
        )?),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let scene = file
        .to_scene()?
        .ok_or_else(|| Failure::config("scene has no source position"))?;
    let model = SignalModel {
        gain_law: match args.gain {
            GainArg::InverseDistance => GainLaw::InverseDistance,
            GainArg::Unit => GainLaw::Unit,
        },
        ..SignalModel::white_noise(args.snr, args.seed)
    };
    let signals = synth_signals(&scene, &model, args.duration, f64::from(args.sample_rate))?;
    let format = match args.format {
        FormatArg::Float32 => WavFormat::Float32,
        FormatArg::Pcm16 => WavFormat::Pcm16,
    };
    write_wav(&args.out, &signals, format).map_err(|e| Failure::at(&args.out, e))?;
    println!("wav: {}", args.out.display());
    if let Some(path) = &args.scene_out {
        write_scene(path, &file).map_err(|e| Failure::at(path, e))?;
        println!("scene: {}", path.display());
    }
    if let Some(path) = &args.rd_out {
        let rd: RdMatrix = true_rd_full(&scene);
        write_rd_csv(path, &rd).map_err(|e| Failure::at(path, e))?;
        println!("rd: {}", path.display());
    }
    Ok(())
}
