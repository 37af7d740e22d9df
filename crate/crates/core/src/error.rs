use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("cannot locate disc: {0}")]
    Location(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("manifest error at {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] crate::persistence::CheckpointError),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error for {path}: {source}")]
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
