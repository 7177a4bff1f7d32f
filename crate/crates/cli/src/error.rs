use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{origin}: {message}")]
    Config { origin: String, message: String },
    #[error(transparent)]
    Lab(#[from] transfer_lab::Error),
}

impl CliError {
    pub(crate) fn config(origin: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            origin: origin.to_string(),
            message: message.into(),
        }
    }

    /// Process exit status: 2 for bad input, 3 for refusals, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Lab(transfer_lab::Error::Usage(_)) => 2,
            CliError::Lab(transfer_lab::Error::Refused(_)) => 3,
            CliError::Lab(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
