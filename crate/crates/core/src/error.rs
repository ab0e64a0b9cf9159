use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report. Variants map onto the CLI exit
/// codes through [`HespError::exit_code`].
#[derive(Debug, Error)]
pub enum HespError {
    #[error("ingestion error at {}{}: {reason}", path.display(), row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Ingestion {
        path: PathBuf,
        row: Option<usize>,
        reason: String,
    },

    #[error("schema error in row {row}: {reason}")]
    Schema { row: usize, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss in component `{component}` at step {step}")]
    Divergence { component: String, step: usize },

    #[error("check failed: {0}")]
    Check(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HespError>;

impl HespError {
    /// 1 for validation failures (bad input, config, or protocol), 2 for
    /// runtime failures (divergence, I/O, rendering).
    pub fn exit_code(&self) -> i32 {
        match self {
            HespError::Ingestion { .. }
            | HespError::Schema { .. }
            | HespError::Domain(_)
            | HespError::Protocol(_)
            | HespError::Contract(_)
            | HespError::Index(_)
            | HespError::Calibration(_)
            | HespError::Metric(_)
            | HespError::Compatibility(_)
            | HespError::Config(_) => 1,
            HespError::Divergence { .. }
            | HespError::Check(_)
            | HespError::Plot(_)
            | HespError::Serialization(_)
            | HespError::Io(_) => 2,
        }
    }
}

impl From<serde_json::Error> for HespError {
    fn from(e: serde_json::Error) -> Self {
        HespError::Serialization(e.to_string())
    }
}

impl From<csv::Error> for HespError {
    fn from(e: csv::Error) -> Self {
        HespError::Serialization(e.to_string())
    }
}
