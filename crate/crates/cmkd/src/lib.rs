//! Host-side companion to `cmkd-core`: dataset and checkpoint files, the run
//! configuration format, threaded execution, CSV reports and the subcommands
//! of the `cmkd` binary.

pub mod bytes;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod runner;

pub use error::CliError;
