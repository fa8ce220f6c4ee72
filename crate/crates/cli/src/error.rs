use std::path::Path;

use gridnode::datagen::DataError;
use gridnode::evaluation::EvalError;
use gridnode::models::ModelError;
use gridnode::odeint::OdeError;
use gridnode::training::TrainError;
use gridnode::transfer::TransferError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Diverged { .. } | DataError::Ode(_) => CliError::Numeric(e.to_string()),
            DataError::Io { .. } | DataError::Format { .. } => CliError::Io(e.to_string()),
            DataError::Config(_) | DataError::TooShort { .. } | DataError::Grid(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Format { .. } => CliError::Io(e.to_string()),
            ModelError::Ode(OdeError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::Input(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::Model(m) => m.into(),
            TransferError::Train(t) => t.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}
