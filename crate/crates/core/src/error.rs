use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlError>;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("schema error at line {line}: {msg}")]
    Schema { line: u64, msg: String },

    #[error("access budget exhausted for client {client_id} ({max} accesses)")]
    BudgetExhausted { client_id: usize, max: usize },

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FlError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FlError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FlError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FlError::Config(msg.into())
    }
}
