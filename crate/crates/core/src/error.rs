use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<crate::train::Checkpoint>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
