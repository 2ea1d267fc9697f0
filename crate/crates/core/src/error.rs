use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the factor-mining pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("insufficient history for {stock} at date {date}: need {needed} rows, have {available}")]
    History {
        stock: String,
        date: i64,
        needed: usize,
        available: usize,
    },
    #[error("series too short: need {needed} observations, have {available}")]
    ShortSeries { needed: usize, available: usize },
    #[error("unusable row for {stock} at date {date}")]
    Gap { stock: String, date: i64 },
    #[error("window length {0} is too short")]
    Window(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask does not match feature registry: {0}")]
    Mask(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("degenerate market variance in beta regression")]
    Beta,
    #[error("log of non-positive gross return {0}")]
    LogDomain(f64),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("regression is rank deficient in columns {columns:?}")]
    Regression { columns: Vec<String> },
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
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
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
