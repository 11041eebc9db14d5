use thiserror::Error;

/// Failure classes of a command; each maps to one process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient check failed")]
    GradcheckFailed,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::GradcheckFailed => 5,
        }
    }

    /// Classifies an engine error raised while reading or validating inputs.
    pub fn data(e: dgcrf::Error) -> Self {
        match e {
            dgcrf::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Data(other.to_string()),
        }
    }

    /// Classifies an engine error raised while computing.
    pub fn compute(e: dgcrf::Error) -> Self {
        match e {
            dgcrf::Error::Numeric(m) => CliError::Numeric(m),
            dgcrf::Error::Param(m) | dgcrf::Error::Contract(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
