use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("backend `{backend}` does not support {capability}")]
    Capability { backend: String, capability: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite gradient at PGD step {step}")]
    NonFiniteGradient { step: usize },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("pair `{pair_id}` failed during {stage}: {source}")]
    Stage {
        pair_id: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image decode {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("interrupted")]
    Interrupted,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn capability(backend: &str, capability: &str) -> Self {
        Error::Capability {
            backend: backend.to_string(),
            capability: capability.to_string(),
        }
    }

    pub(crate) fn in_stage(self, pair_id: &str, stage: &'static str) -> Self {
        Error::Stage {
            pair_id: pair_id.to_string(),
            stage,
            source: Box::new(self),
        }
    }
}
