use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CopaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CopaError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// Schema or config validation failure, with the offending field path.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("index out of range: {what} = {index}, allowed 0..{len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("intervention error: {0}")]
    Intervention(String),
}

impl CopaError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        CopaError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CopaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code, used by the CLI error record and the service.
    pub fn code(&self) -> &'static str {
        match self {
            CopaError::Io { .. } => "io",
            CopaError::Parse { .. } => "parse",
            CopaError::Invalid { .. } => "invalid",
            CopaError::IndexOutOfRange { .. } => "index_out_of_range",
            CopaError::Shape(_) => "shape",
            CopaError::Manifest { .. } => "manifest",
            CopaError::NonFinite { .. } => "non_finite",
            CopaError::Image(_) => "image",
            CopaError::Checkpoint(_) => "checkpoint",
            CopaError::Intervention(_) => "intervention",
        }
    }
}

pub(crate) fn check_index(what: &'static str, index: usize, len: usize) -> Result<()> {
    if index < len {
        Ok(())
    } else {
        Err(CopaError::IndexOutOfRange { what, index, len })
    }
}
