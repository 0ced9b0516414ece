use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid band `{name}`: {lo_hz}-{hi_hz} Hz (nyquist {nyquist} Hz)")]
    InvalidBand {
        name: String,
        lo_hz: f64,
        hi_hz: f64,
        nyquist: f64,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("`{key}` out of range: {message}")]
    OutOfRange { key: String, message: String },

    #[error("stale trace: parameters changed since the forward pass")]
    StaleTrace,

    #[error("unknown subject `{0}`")]
    UnknownSubject(String),

    #[error("subject `{subject}` has no session at index {index}")]
    MissingSession { subject: String, index: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("fold `{fold}`: {source}")]
    Fold {
        fold: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidBand { .. }
            | Error::DimensionMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::OutOfRange { .. }
            | Error::Config(_)
            | Error::Format { .. }
            | Error::UnknownSubject(_)
            | Error::MissingSession { .. }
            | Error::Empty(_) => true,
            Error::Fold { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
