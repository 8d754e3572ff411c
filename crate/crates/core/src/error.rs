use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed manifest {path}:{line}: {reason}")]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),

    #[error("video {0} has no MID frames to sample for pretext training")]
    NoMidFrames(String),

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("parameter names do not correspond: {}", .0.join(", "))]
    NameMismatch(Vec<String>),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensor(Vec<String>),

    #[error("architecture mismatch: checkpoint encoder is {found}, model expects {expected}")]
    ArchMismatch { expected: String, found: String },

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("config error at line {line}, key `{key}`: {reason}")]
    Config {
        line: usize,
        key: String,
        reason: String,
    },

    #[error("batch size {0} is too small: contrastive training needs at least 2 images per batch")]
    InsufficientBatch(usize),

    #[error("split {0} has no labelled records")]
    EmptySplit(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
