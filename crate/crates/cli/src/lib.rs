//! Run configuration and subcommand implementations behind the `lfs` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
