use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrlError>;

#[derive(Debug, Error)]
pub enum CrlError {
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a shape or range precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("malformed header at byte offset {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },

    #[error("truncated file at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },

    #[error("schema violation at byte offset {offset}: {reason}")]
    SchemaViolation { offset: u64, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (dump: {dump})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        dump: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl CrlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CrlError::Config(_) => "config",
            CrlError::Contract(_) => "contract",
            CrlError::NumericInput(_) => "numeric-input",
            CrlError::Evaluation(_) => "evaluation",
            CrlError::MalformedHeader { .. } => "malformed-header",
            CrlError::Truncated { .. } => "truncated",
            CrlError::SchemaViolation { .. } => "schema-violation",
            CrlError::NonFiniteLoss { .. } => "non-finite-loss",
            CrlError::Io { .. } => "io",
            CrlError::Json(_) => "json",
            CrlError::Toml(_) => "toml",
        }
    }
}
