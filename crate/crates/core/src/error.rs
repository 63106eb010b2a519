use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("index out of range at line {line}: face references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange {
        line: usize,
        index: i64,
        count: usize,
    },

    #[error("degenerate face {face}: zero area")]
    DegenerateFace { face: usize },

    #[error("topology error on edge ({0}, {1}): {2}")]
    Topology(usize, usize, String),

    #[error("correspondence mismatch: {0}")]
    Correspondence(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("denoiser failed: {0}")]
    Denoiser(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation errors are the caller's fault (bad input); everything else is internal.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Denoiser(_))
    }
}
