//! Configuration and subcommand implementations for the `fedsim` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
