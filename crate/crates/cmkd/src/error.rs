use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::dataset::DatasetError;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INVARIANT: i32 = 1;
    pub const MISSING_INPUT: i32 = 2;
    pub const CONFIG: i32 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("checkpoint not found: {}", .0.display())]
    NoCheckpoint(PathBuf),
    #[error("dataset not found: {}", .0.display())]
    NoDataset(PathBuf),
    #[error("input not found: {}", .0.display())]
    NoInput(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] cmkd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: max relative error {max_rel_error:e} at {location}")]
    GradCheckFailed { max_rel_error: f64, location: String },
    #[error("distilled student below baseline for {0}")]
    ReportFailed(String),
    #[error("malformed report row in {path}: {line}")]
    BadReportRow { path: PathBuf, line: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::NoCheckpoint(_) => "E_NO_CHECKPOINT",
            CliError::NoDataset(_) => "E_NO_DATASET",
            CliError::NoInput(_) => "E_NO_INPUT",
            CliError::Config(e) => e.code(),
            CliError::Dataset(e) => e.code(),
            CliError::Checkpoint(e) => e.code(),
            CliError::Core(e) => match e {
                cmkd_core::Error::IncompatibleTeacher(_) => "E_INCOMPATIBLE_TEACHER",
                cmkd_core::Error::InvalidConfig(_) => "E_CONFIG_INVALID",
                cmkd_core::Error::NonFinite { .. } => "E_NON_FINITE",
                _ => "E_INVARIANT",
            },
            CliError::Io { .. } => "E_IO",
            CliError::GradCheckFailed { .. } => "E_GRADCHECK",
            CliError::ReportFailed(_) => "E_REPORT_FAIL",
            CliError::BadReportRow { .. } => "E_BAD_REPORT",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NoCheckpoint(_) | CliError::NoDataset(_) | CliError::NoInput(_) => exit::MISSING_INPUT,
            CliError::Config(_) => exit::CONFIG,
            CliError::Checkpoint(CheckpointError::FingerprintMismatch) => exit::CONFIG,
            CliError::Core(cmkd_core::Error::IncompatibleTeacher(_) | cmkd_core::Error::InvalidConfig(_)) => exit::CONFIG,
            _ => exit::INVARIANT,
        }
    }
}
