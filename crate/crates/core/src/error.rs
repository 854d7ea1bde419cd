use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents could not be decoded.
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("invalid calibration: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("no road prototype: fewer than {min} trajectory patches and no carried prototype")]
    NoPrototype { min: usize },

    #[error("road prototype has zero norm")]
    ZeroNormPrototype,

    #[error("maximum similarity in frame is {0}, expected a positive value")]
    NonPositiveSimilarity(f64),

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Failures confined to one frame's data, after which the remaining
    /// frames can still be labeled.
    pub fn is_frame_local(&self) -> bool {
        matches!(
            self,
            Error::NoPrototype { .. } | Error::ZeroNormPrototype | Error::NonPositiveSimilarity(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
