//! Run configuration, artifact formats and the subcommand pipeline behind
//! the `elastic-ard` binary.

pub mod config;
pub mod csvio;
pub mod error;
pub mod pipeline;

pub use config::{load_config, parse_config, RunConfig};
pub use error::{CliError, CliResult};
pub use pipeline::Pipeline;
