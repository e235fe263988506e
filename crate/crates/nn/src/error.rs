use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed parameter file: {0}")]
    Format(String),
}
