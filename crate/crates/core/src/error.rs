use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("insufficient data: need at least {needed} timesteps, have {available}")]
    InsufficientData { needed: usize, available: usize },
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("numeric failure in {location}")]
    Numeric { location: String },
    #[error("missing graph: variant {0} needs an adjacency matrix")]
    MissingGraph(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("cannot rescale a constant matrix (value {0})")]
    DegenerateScale(f64),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure classes, each mapped to its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
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
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::MissingGraph(_)
            | Error::IncompatibleCheckpoint(_) => ErrorClass::Config,
            Error::Shape(_)
            | Error::Format(_)
            | Error::Data(_)
            | Error::InsufficientData { .. }
            | Error::UndefinedMetric(_)
            | Error::DegenerateScale(_) => ErrorClass::Data,
            Error::DegenerateRow { .. } | Error::Numeric { .. } => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}
