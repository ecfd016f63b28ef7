//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Template file failed schema parsing (bad JSON, missing keys).
    #[error("template parse error: {0}")]
    TemplateParse(String),

    /// Template parsed but violated a structural invariant.
    #[error("template validation error: {0}")]
    TemplateValidation(String),

    /// Score / label / embedding dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Label file or synthetic-spec ingestion failure.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint container is corrupt, truncated, or of the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Evaluation harness misuse (inconsistent runs, empty input).
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
