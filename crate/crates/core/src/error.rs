use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("cross-entropy target contains only padding")]
    EmptyTarget,

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("scene has no cells")]
    EmptyScene,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing data: {0}")]
    DataMissing(String),

    #[error("malformed data in {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergedLoss { step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures rooted in the input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::EmptyScene
                | Error::DataMissing(_)
                | Error::Malformed { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Checkpoint(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::DivergedLoss { .. })
    }
}
