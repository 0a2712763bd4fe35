use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("backward seed node {node} is not scalar")]
    SeedNotScalar { node: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("csv format error at line {line}: {detail}")]
    CsvFormat { line: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
