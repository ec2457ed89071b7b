use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate histogram: image has a single intensity level ({0})")]
    DegenerateHistogram(u8),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pretrained weights not found{}; {hint}", path.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    MissingWeights { path: Option<PathBuf>, hint: String },

    #[error("weight file does not match the model layout: {0}")]
    WeightLayout(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("checksum mismatch for {}: expected {expected}, found {found}", path.display())]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("pixel ({row}, {col}) received zero blend weight")]
    Coverage { row: usize, col: usize },

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("no training patches survived selection")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Layout(_) | Error::EmptyDataset => 2,
            Error::Validation(_)
            | Error::Shape(_)
            | Error::DegenerateHistogram(_)
            | Error::EmptyMask
            | Error::Coverage { .. }
            | Error::Config(_) => 3,
            Error::Incompatible(_) | Error::Checksum { .. } | Error::WeightLayout(_) | Error::MissingWeights { .. } => {
                4
            }
            Error::Divergence(_) => 5,
            Error::Io { .. } | Error::Format { .. } => 1,
        }
    }
}
