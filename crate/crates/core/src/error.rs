use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("frame {height}x{width} is smaller than the fragment side {required}; upscale at ingestion first")]
    FrameTooSmall {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("fragment plan does not match video: {0}")]
    PlanMismatch(String),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("video has no frames")]
    EmptyVideo,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergedTraining { epoch: usize, loss: f64 },

    #[error("ensemble grid is incomplete: missing branch {branch} fold {fold}")]
    IncompleteGrid { branch: usize, fold: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("heatmap and prediction segments do not overlap in time")]
    NoOverlap,

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("item {id}: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_item(id: impl Into<String>, source: Error) -> Self {
        Error::Item {
            id: id.into(),
            source: Box::new(source),
        }
    }

    /// True for failures caused by the input data rather than by the
    /// configuration. The CLI maps these to a distinct exit code.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Decode { .. }
            | Error::EmptyVideo
            | Error::FrameTooSmall { .. }
            | Error::PlanMismatch(_)
            | Error::ShapeMismatch(_)
            | Error::DivergedTraining { .. }
            | Error::DegenerateInput(_)
            | Error::NoOverlap => true,
            Error::Item { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}
