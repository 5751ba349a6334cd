//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what an operation required.
    /// `context` names the operation and the offending dimension.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown tap layer `{0}`")]
    UnknownTap(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("model is frozen and cannot be trained")]
    FrozenModel,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("ensemble weights must sum to 1 (got {0})")]
    WeightSum(f64),

    #[error("{0} channels not divisible into {1} groups")]
    NonDivisibleChannels(usize, usize),

    #[error("malformed {format} data: {detail}")]
    BadFormat { format: String, detail: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn bad_format(format: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::BadFormat {
            format: format.into(),
            detail: detail.into(),
        }
    }

    /// Wrap an error with the name of the pipeline stage that failed.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
