use std::path::PathBuf;

use thiserror::Error;

use crate::encoder::EncoderParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value at batch row {row}, time step {step}")]
    NonFinite { row: usize, step: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("incompatible checkpoint: vocabulary hash {expected} does not match table hash {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        /// Parameters of the best epoch seen before the loss became non-finite.
        last_finite: Box<EncoderParams>,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
