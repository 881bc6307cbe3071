use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lego_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Ingest(String),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Training hit a non-finite loss; a diagnostic checkpoint was written.
    #[error("{source} (diagnostic checkpoint: {checkpoint})")]
    Diverged {
        source: lego_core::Error,
        checkpoint: PathBuf,
    },
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: &Path, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable category for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(lego_core::Error::Numeric(_)) | Error::Diverged { .. } => "numeric",
            Error::Core(lego_core::Error::Shape { .. }) => "shape",
            Error::Core(_) | Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Ingest(_) | Error::Image { .. } => "ingest",
        }
    }
}
