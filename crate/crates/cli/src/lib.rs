//! Configuration loading, run orchestration and artifact persistence for the
//! `spme` command-line tool.

pub mod app;
pub mod config;

pub use app::{run, AppError, Command, RunOptions, Summary};
pub use config::{load_config, parse_config, RunConfig};
