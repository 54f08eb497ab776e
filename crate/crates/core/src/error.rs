use thiserror::Error;

/// Errors raised by the toolkit. Numerical degeneracy of an otherwise valid
/// input is not an error: estimators report it through
/// [`Status::Degenerate`](crate::geometry::Status).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("insufficient microphones: {method} needs at least {needed}, got {got}")]
    InsufficientMicrophones {
        method: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("microphone index {index} out of range for {count} microphones")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("range-difference matrix is not antisymmetric (max deviation {deviation:e} m)")]
    NotAntisymmetric { deviation: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance matrix is not symmetric positive definite: {0}")]
    InvalidCovariance(String),

    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("invalid frame configuration: {0}")]
    InvalidFrameConfig(String),

    #[error("no correlation peak: both frames are silent")]
    NoPeak,

    #[error("no frames survived for microphone pair ({0}, {1})")]
    InvalidPair(usize, usize),

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
