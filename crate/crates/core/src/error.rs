use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio is silent (all samples are zero)")]
    SilentAudio,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: u32, right: u32 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("audio too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("feature dimension {got} does not match model input dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("model file format mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("model file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("target of {target_len} labels needs at least {needed} windows, only {windows} available")]
    Unalignable {
        target_len: usize,
        needed: usize,
        windows: usize,
    },
    #[error("logit matrix is empty")]
    EmptyLogits,
    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("phrase too long: |t| + lambda = {needed} exceeds transcript length |y| = {available}")]
    PhraseTooLong { needed: usize, available: usize },
    #[error("clip of {clip_len} samples starting at {start} does not fit in {audio_len} samples")]
    AudioTooShort {
        start: usize,
        clip_len: usize,
        audio_len: usize,
    },
    #[error("attack loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("target text is empty")]
    EmptyTarget,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("character {0:?} is not in the alphabet")]
    UnknownSymbol(char),
    #[error("corpus manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
