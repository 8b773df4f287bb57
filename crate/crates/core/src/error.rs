//! Crate-wide error type with stable machine-readable codes.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error on axis {axis}: {msg}")]
    Dimension { axis: &'static str, msg: String },

    #[error("format error at byte {offset} in {}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Compat(String),

    #[error("no occluder available")]
    NoOccluder,

    #[error("scene spec error: {0}")]
    Scene(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    /// Stable single-token code, printed by the CLI ahead of the human text.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "DIMENSION",
            Error::Format { .. } => "FORMAT",
            Error::Io { .. } => "IO",
            Error::Config(_) => "CONFIG",
            Error::Compat(_) => "COMPAT",
            Error::NoOccluder => "NO_OCCLUDER",
            Error::Scene(_) => "SCENE",
            Error::Train(_) => "TRAIN",
            Error::UndefinedMetric(_) => "UNDEFINED_METRIC",
        }
    }

    pub fn dimension(axis: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            msg: msg.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
