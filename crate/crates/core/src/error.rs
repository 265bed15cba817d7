use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("{path}: malformed header field `{field}`: {detail}")]
    Header {
        path: PathBuf,
        field: &'static str,
        detail: String,
    },

    #[error(
        "{path}: payload length mismatch in `{field}`: expected {expected} values, found {found}"
    )]
    LengthMismatch {
        path: PathBuf,
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in `{field}` at index {index}")]
    NonFinite { field: String, index: usize },

    #[error("label `{field}` holds non-binary value {value} at index {index}")]
    NonBinaryLabel {
        field: String,
        index: usize,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("synthetic shape has no foreground voxels inside the grid")]
    EmptyForeground,

    #[error("mask `{0}` is empty")]
    EmptyMask(&'static str),

    #[error("tape: {0}")]
    Tape(String),

    #[error("non-finite {what} at iteration {iteration}")]
    Diverged { what: &'static str, iteration: u64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::Header { .. } => "header",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonBinaryLabel { .. } => "non_binary_label",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config { .. } => "config",
            Error::EmptyForeground => "empty_foreground",
            Error::EmptyMask(_) => "empty_mask",
            Error::Tape(_) => "tape",
            Error::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Returns the first non-finite entry of `values` as an error.
pub(crate) fn ensure_finite(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            field: field.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
