//! Everything behind the `anchorattn` binary: run configuration, datasets,
//! the demo classifier and one function per command. Commands write their
//! report to a caller-supplied writer and return the process exit code for
//! property outcomes; errors carry their own code via
//! [`Error::exit_code`](crate::Error::exit_code).

pub mod anchors_fit;
pub mod commands;
pub mod config;
pub mod data;
pub mod model;
pub mod verify;

pub use config::RunConfig;
