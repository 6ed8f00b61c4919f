//! Crate-wide error type.

use crate::types::Mode;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no available mode: every alternative has infinite generalized cost")]
    NoAvailableMode,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid cost for mode {mode}: generalized cost {value} must be strictly positive")]
    InvalidCost { mode: Mode, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown zone key '{0}'")]
    MissingZone(String),

    #[error("missing attribute rows for keys: {0:?}")]
    MissingAttributes(Vec<String>),

    #[error("R-squared undefined: observed totals have zero variance")]
    UndefinedRSquared,

    #[error("shift shares undefined: row for mode {0} has zero total")]
    UndefinedShares(Mode),

    #[error("degenerate posterior: all samples have -inf joint log-likelihood")]
    DegeneratePosterior,

    #[error("training diverged ({0}); retry with a smaller learning rate")]
    Divergence(String),

    #[error("internal consistency violation: {0}")]
    InternalConsistency(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("schema mismatch in {file}: {detail}")]
    SchemaMismatch { file: String, detail: String },

    #[error("dangling key in {file} row {row}: {detail}")]
    DanglingKey {
        file: String,
        row: usize,
        detail: String,
    },

    #[error("negative value in {file} row {row}: {detail}")]
    NegativeValue {
        file: String,
        row: usize,
        detail: String,
    },

    #[error("model file format error: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_parameter(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
