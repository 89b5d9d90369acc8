use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("{path}: {field}: {message}")]
    Schema {
        path: String,
        field: String,
        message: String,
    },

    #[error("non-finite loss at epoch {epoch}, task `{task}`, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        task: String,
        batch: usize,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::UnknownTask(_) => "unknown_task",
            Error::Numeric(_) => "numeric",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::InvalidSample(_) => "invalid_sample",
            Error::Schema { .. } => "schema",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Tensor(_) => "tensor",
        }
    }

    /// True for errors caused by invalid user input rather than a failure
    /// while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Config(_)
                | Error::UnknownTask(_)
                | Error::InvalidSample(_)
                | Error::Schema { .. }
                | Error::Json(_)
        )
    }
}
