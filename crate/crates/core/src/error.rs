use std::path::PathBuf;

/// Errors produced by the tbn pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Tensor or array shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("cannot partition height {height} into {pieces} equal pieces")]
    Partition { height: usize, pieces: usize },

    #[error("label {label} out of range for {num_identities} identities")]
    Label { label: usize, num_identities: usize },

    #[error("weight file {path}: parameter `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight file {path}: missing parameter `{name}`")]
    WeightMissing { path: PathBuf, name: String },

    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Label { .. } | Error::Partition { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
