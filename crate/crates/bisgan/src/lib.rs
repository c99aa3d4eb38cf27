//! Filesystem and command-line layer over `bisgan-core`: PNG corpora,
//! checkpoint files, TOML run configs and the `bisgan` binary's commands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;

pub use error::{Error, Result};
