use thiserror::Error;

use crate::geometry::GeometryError;
use crate::importance::ImportanceError;
use crate::model::ModelError;
use crate::optics::OpticsError;
use crate::readout::{CodecError, ReadoutError};
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error. Each module keeps its own error enum; this wraps them
/// so the CLI and dataset code can use `?` across module boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
