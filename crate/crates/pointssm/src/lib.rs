//! Command line front end for `pointssm-core`: checkpoint files, run
//! configuration, metrics and plots, and the block benchmark.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use error::{CliError, CliResult};
