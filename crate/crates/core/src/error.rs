use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label range: y_min ({y_min}) must be < y_max ({y_max})")]
    InvalidRange { y_min: f64, y_max: f64 },
    #[error("invalid group count {0}: at least 2 groups are required")]
    InvalidGroups(usize),
    #[error("label {y} outside [{y_min}, {y_max}]")]
    OutOfRange { y: f64, y_min: f64, y_max: f64 },
    #[error("group index {group} out of range for {num_groups} groups")]
    InvalidGroup { group: usize, num_groups: usize },
    #[error("degenerate density: every smoothed count is zero")]
    DegenerateDensity,
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("zero variance input")]
    ZeroVariance,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: malformed row at line {line}: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("checkpoint has {checkpoint} groups but {requested} were requested")]
    GroupMismatch { checkpoint: usize, requested: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad user input (flags or configuration)
    /// rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidRange { .. }
                | Error::InvalidGroups(_)
                | Error::InvalidDims(_)
                | Error::Config(_)
                | Error::InvalidPrior(_)
        )
    }
}
