//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest {path}: line {line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest {path}: no records")]
    EmptyManifest { path: PathBuf },

    #[error("record {id}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("audio {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("audio {path}: sample rate {found} Hz unsupported, expected {expected} Hz")]
    SampleRate {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("segment [{start}, {end}) out of range for {len}-sample waveform")]
    SliceOutOfRange { start: usize, end: usize, len: usize },

    #[error("speed factor {0} outside supported range (0.5, 2.0)")]
    SpeedFactor(f64),

    #[error("feature extraction: {0}")]
    Feature(String),

    #[error("cmvn: {0}")]
    Cmvn(String),

    #[error("synthesis config: {0}")]
    SynthConfig(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training: {0}")]
    Training(String),

    #[error("non-finite gradient in parameter {param} at entry {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("scoring: {0}")]
    Scoring(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{path}: bad file format: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config file {path}: line {line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
