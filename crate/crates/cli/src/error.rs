use thiserror::Error;

/// Failure categories, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("cannot write output: {0}")]
    Output(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Output(_) => 5,
            CliError::Internal(_) => 70,
        }
    }
}

impl From<mmpfn_core::Error> for CliError {
    fn from(e: mmpfn_core::Error) -> Self {
        use mmpfn_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Invalid(_) | E::Json(_) => CliError::Config(msg),
            E::Data(_) | E::Format { .. } | E::Csv(_) | E::Io(_) => CliError::Data(msg),
            E::NonFinite(_) => CliError::Numeric(msg),
            E::Shape { .. } => CliError::Internal(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
