use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error at row {row}: {message}")]
    Csv { row: u64, message: String },

    #[error("empty file: no data rows")]
    EmptyFile,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-binary treatment, row {row}")]
    NonBinaryTreatment { row: u64 },

    #[error("non-numeric field in column `{column}`, row {row}")]
    NonNumeric { row: u64, column: String },

    #[error("non-finite value in column `{column}`, row {row}")]
    NonFinite { row: u64, column: String },

    #[error("duplicate unit {unit} in cluster `{cluster}`")]
    DuplicateUnit { cluster: String, unit: String },

    #[error("duplicate cluster id `{0}`")]
    DuplicateCluster(String),

    #[error("positivity violation: probability {p} is not strictly inside (0, 1)")]
    PositivityViolation { p: f64 },

    #[error("design column `{0}` was not loaded with the dataset")]
    MissingDesignColumn(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no unit with treatment {arm} in the dataset")]
    DegenerateArm { arm: u8 },

    #[error("weighted denominator is zero")]
    ZeroDenominator,

    #[error("duplicate gamma vector {0:?}")]
    DuplicateGamma(Vec<f64>),

    #[error("gamma vector {0:?} is not part of the estimated grid")]
    GammaNotFound(Vec<f64>),

    #[error("estimates do not belong to this dataset: {0}")]
    Mismatch(String),

    #[error("need at least {needed} clusters, found {found}")]
    TooFewClusters { needed: usize, found: usize },

    #[error("{discarded} of {reps} bootstrap replicates had a degenerate arm (limit 10%)")]
    TooManyDiscarded { discarded: usize, reps: usize },

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue})")]
    NotPositiveSemiDefinite { min_eigenvalue: f64 },

    #[error("cluster of size {n} exceeds the enumeration cap of {cap}")]
    EnumerationCap { n: usize, cap: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
