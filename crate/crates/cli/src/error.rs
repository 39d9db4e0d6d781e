use concurrent_options::Error as CoreError;
use thiserror::Error;

/// Command failures, each with a stable process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    /// 0 ok, 1 internal, 2 config, 3 non-convergence, 4 I/O, 5 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io(_) => 4,
            CliError::VerificationFailed(_) => 5,
            CliError::Core(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NotConverged { .. } | CoreError::Truncation { .. } => CliError::NotConverged(e.to_string()),
            CoreError::Config(_)
            | CoreError::Layout(_)
            | CoreError::InvalidState(_)
            | CoreError::UnknownVariable(_)
            | CoreError::Incoherent(..)
            | CoreError::InvalidPartition(_)
            | CoreError::ZeroHorizon => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
