//! Experiment orchestration for `dualfilter-core`: configuration documents,
//! file formats, a rayon executor, the CLI subcommands and the acceptance
//! suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod io;

pub use config::{Experiment, ExperimentConfig};
pub use error::{CliError, Result};
pub use exec::RayonExecutor;

/// Environment variable overriding the output directory.
pub const ENV_OUT: &str = "DUALFILTER_OUT";
/// Environment variable overriding the worker count.
pub const ENV_THREADS: &str = "DUALFILTER_THREADS";
