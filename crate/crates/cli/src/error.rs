use thiserror::Error;

/// CLI failures, each class with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid input data: {0}")]
    Data(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
}

impl CliError {
    /// 2 is left to argument parsing errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Estimation(_) => 6,
        }
    }
}

impl From<spillover::Error> for CliError {
    fn from(e: spillover::Error) -> Self {
        use spillover::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } => CliError::Io(msg),
            E::Csv { .. }
            | E::EmptyFile
            | E::MissingColumn(_)
            | E::NonBinaryTreatment { .. }
            | E::NonNumeric { .. }
            | E::NonFinite { .. }
            | E::DuplicateUnit { .. }
            | E::DuplicateCluster(_)
            | E::MissingDesignColumn(_)
            | E::PositivityViolation { .. } => CliError::Data(msg),
            E::InvalidParameter(_) | E::DimensionMismatch { .. } | E::DuplicateGamma(_) | E::GammaNotFound(_) => {
                CliError::Config(msg)
            }
            _ => CliError::Estimation(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
