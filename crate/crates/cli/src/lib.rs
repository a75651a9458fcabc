//! The `i2e` command line: one JSON run configuration, ten subcommands that
//! compose the core pipeline stages, and a manifest per run.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, Cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
pub use config::{RunConfig, SourceKind, SplitConfig};
pub use pipeline::{Ctx, RunManifest};
