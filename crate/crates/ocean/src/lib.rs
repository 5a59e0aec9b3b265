//! File formats, configuration and the command-line front end of the
//! tracker in `ocean-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod weights;

pub use ocean_core as core;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
