use std::process::ExitCode;

use robustbf::bgnn::BgnnError;
use robustbf::channel::ChannelError;
use robustbf::metrics::MetricsError;
use robustbf::numerics::NumericsError;
use robustbf::powermin::PowerMinError;
use robustbf::training::{CheckpointError, TrainError};
use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } | NumericsError::SingularMatrix { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ChannelError> for CliError {
    fn from(e: ChannelError) -> Self {
        match e {
            ChannelError::Io(_) | ChannelError::BadMagic | ChannelError::VersionMismatch { .. } | ChannelError::Corrupt(_) => {
                CliError::Io(e.to_string())
            }
            ChannelError::Numerics(n) => n.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Numerics(n) => n.into(),
            MetricsError::Channel(c) => c.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<BgnnError> for CliError {
    fn from(e: BgnnError) -> Self {
        match e {
            BgnnError::Numerics(n) => n.into(),
            BgnnError::Beamform(b) => CliError::Numerical(b.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Numerics(n) => n.into(),
            TrainError::Bgnn(b) => b.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Channel(c) => c.into(),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) | CheckpointError::Parse(_) => CliError::Io(e.to_string()),
            CheckpointError::Version { .. } | CheckpointError::Mismatch(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<PowerMinError> for CliError {
    fn from(e: PowerMinError) -> Self {
        match e {
            PowerMinError::Eval(t) => t.into(),
            PowerMinError::IterationCap { .. } => CliError::Numerical(e.to_string()),
            PowerMinError::InvalidConfig(_) => CliError::Config(e.to_string()),
        }
    }
}
