use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("index out of range: {what} = {value}, limit {limit}")]
    IndexOutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty data: {0}")]
    EmptyData(&'static str),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("could not collect {wanted} patches after {attempts} draws ({found} accepted)")]
    RetryBudget {
        wanted: usize,
        found: usize,
        attempts: usize,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("layer {0} has not been fitted")]
    Unfitted(usize),
    #[error("bad magic in {path}: expected {expected}, found {found}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },
    #[error("truncated {0}")]
    Truncated(String),
    #[error("parse error at {path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("model format: {0}")]
    Format(String),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { context, expected, got }
    }

    /// True for errors caused by bad user input rather than an internal failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Unfitted(_))
    }
}
