//! Command-line pipeline: prepare, train, tune, predict, evaluate, report.

pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use cli::{run, Cli};
pub use config::Config;
pub use error::CliError;
