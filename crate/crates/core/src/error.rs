use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` at row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("zero data rows")]
    ZeroRows,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient rows: need {needed}, have {available}")]
    InsufficientRows { needed: usize, available: usize },

    #[error("truth missing on labeled row {0}")]
    MissingTruth(usize),

    #[error("rank deficient design ({context})")]
    RankDeficient { context: String },

    #[error("not enough observations: n = {n}, parameters = {k}")]
    TooFewObservations { n: usize, k: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no candidate produced an estimate: {0}")]
    NoEstimate(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn rank(context: impl Into<String>) -> Self {
        Error::RankDeficient {
            context: context.into(),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by a
    /// numerical failure during estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::FileNotFound(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::MissingColumn(_)
                | Error::NonNumeric { .. }
                | Error::ZeroRows
                | Error::InvalidInput(_)
                | Error::DimensionMismatch { .. }
                | Error::MissingTruth(_)
        )
    }
}
