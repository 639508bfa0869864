//! Configuration, data ingestion, and experiment commands for the `ububu` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;
pub mod target;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
