use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: Dims, found: Dims },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("noise spec kind {found} passed to the {expected} injector")]
    WrongNoiseKind { expected: &'static str, found: &'static str },

    #[error("negative intensity {value} at voxel {index}; Rician noise needs non-negative input")]
    NegativeIntensity { index: usize, value: f64 },

    #[error("phantom geometry out of bounds: {0}")]
    Geometry(String),

    #[error("zero-variance input to NCC (degenerate region)")]
    ZeroVariance,

    #[error("volume {dims} too small: need at least {min} voxels along every axis")]
    TooSmall { dims: Dims, min: usize },

    #[error("numerical abort at level {level}, step {step}: {what}")]
    NumericalAbort { level: usize, step: usize, what: String },

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("need at least {min} non-zero paired differences, got {n}")]
    TooFewSamples { n: usize, min: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
