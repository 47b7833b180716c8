use thiserror::Error;

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] probsaint_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },

    #[error("invalid JSON in {path}: {source}")]
    Json { path: String, source: serde_json::Error },

    #[error("server error: {0}")]
    Server(String),
}

impl ServiceError {
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::File { path: path.display().to_string(), source }
    }
}
