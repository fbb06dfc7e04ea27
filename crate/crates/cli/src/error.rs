//! Error type mapping every failure onto the documented exit codes.

use thiserror::Error;

use tail_core::adapters::AdapterError;
use tail_core::bench::BenchError;
use tail_core::checkpoint::CheckpointError;
use tail_core::config::ConfigError;
use tail_core::driver::DriverError;
use tail_core::harness::HarnessError;
use tail_core::policy::PolicyError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 2: the request itself is wrong (bad config, bad flags).
    #[error("{0}")]
    Config(String),
    /// Exit code 3: inputs on disk are missing, corrupt, or inconsistent.
    #[error("{0}")]
    Data(String),
    /// Exit code 4: training diverged.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            HarnessError::Config(_) => CliError::Config(e.to_string()),
            HarnessError::Adapter(a) => a.into(),
            HarnessError::Policy(p) => p.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(_) | BenchError::Capacity { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Config(_) | AdapterError::LayerOutOfRange { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Bench(b) => b.into(),
            DriverError::Policy(p) => p.into(),
            DriverError::Harness(h) => h.into(),
        }
    }
}

pub fn io_err(what: &str, path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{what} {}: {e}", path.display()))
}
