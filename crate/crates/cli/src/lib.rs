//! Pipeline commands behind the `prp` binary.

pub mod commands;
pub mod config;

pub use commands::{CliError, EvalTask};
pub use config::RunConfig;
