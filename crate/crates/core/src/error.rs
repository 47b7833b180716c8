use probsaint_autodiff::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A problem with a single input row; carries the row's index in its batch.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("row {row}: {message}")]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

impl RowError {
    pub fn new(row: usize, message: impl Into<String>) -> Self {
        Self { row, message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("every row failed validation ({} errors, first: {})", .0.len(), .0.first().map(|e| e.to_string()).unwrap_or_default())]
    AllRowsFailed(Vec<RowError>),

    #[error(transparent)]
    Row(#[from] RowError),

    #[error("split error: {0}")]
    Split(String),

    #[error("model error in block {block}: {message}")]
    Model { block: usize, message: String },

    #[error("training error at epoch {epoch}, step {step}: {message}")]
    Training { epoch: usize, step: usize, message: String },

    #[error("search error: every trial diverged")]
    AllTrialsDiverged(Vec<crate::train::TrialRecord>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("forecast error: {0}")]
    Forecast(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
