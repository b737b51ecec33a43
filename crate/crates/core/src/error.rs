use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CalmError {
    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CalmError::Config(_) => "config",
            CalmError::Input(_) => "input",
            CalmError::Contract(_) => "contract",
            CalmError::Sampling(_) => "sampling",
            CalmError::Statistics(_) => "statistics",
            CalmError::NonFinite { .. } => "non_finite",
            CalmError::Checkpoint(_) => "checkpoint",
            CalmError::MissingArtifact(_) => "missing_artifact",
            CalmError::Io(_) => "io",
            CalmError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CalmError>;
