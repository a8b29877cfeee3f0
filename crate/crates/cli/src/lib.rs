//! Command-line driver: config file, run directory, and the
//! `gen-data → pretrain → sweep → report` pipeline.

pub mod commands;
pub mod config;
pub mod report;
pub mod rundir;

pub use config::{ConfigError, ExperimentConfig};
pub use rundir::RunDir;
