//! IO companion to `tolo-core`: file formats, run manifests, and the
//! subcommand implementations behind the `tolo` binary.

pub mod commands;
pub mod formats;
pub mod manifest;

pub use commands::{CliError, ExitCode};
