use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamlError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("schema mismatch on field `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("line {line}: {detail}")]
    Data { line: usize, detail: String },

    #[error("invalid record: {0}")]
    Record(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SamlError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SamlError::Dimension(msg.into()))
}
