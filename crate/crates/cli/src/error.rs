use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] edgeshift::Error),

    /// A valid request that the current state of the run cannot satisfy.
    #[error("refused: {0}")]
    Refused(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Refused(_) => ExitCode::from(3),
            CliError::Core(edgeshift::Error::Precondition(_)) => ExitCode::from(3),
            CliError::Invalid(_) => ExitCode::from(2),
            CliError::Core(e) if e.is_contract_violation() => ExitCode::from(2),
            CliError::Core(_) => ExitCode::from(1),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
