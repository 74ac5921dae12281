use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the stack can report.
///
/// The variants are grouped by the exit-code class the CLI maps them to
/// (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    // tensor files
    #[error("{path}: bad magic, expected KSE1")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: unsupported rank {rank}")]
    UnsupportedRank { path: PathBuf, rank: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // manifests, masks and configs
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid selection mask: {0}")]
    InvalidMask(String),
    #[error("config: {0}")]
    Config(String),

    // numerics
    #[error("empty sequence")]
    EmptySequence,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all per-dimension medians are equal; z-scores undefined")]
    ZeroVariance,
    #[error("mask index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("window {window} does not divide length {len}")]
    NonDividingWindow { window: usize, len: usize },
    #[error("batch of {found} is too small, need at least {min}")]
    BatchTooSmall { min: usize, found: usize },
    #[error("feature dimension {0} is odd")]
    OddFeatureDim(usize),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),
    #[error("slice length {0} is not a positive multiple of the pooling factor")]
    BadSliceLength(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Coarse failure classes, one per CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Check,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::NonFiniteLoss { .. } => ErrorClass::Check,
            _ => ErrorClass::Validation,
        }
    }
}
