//! Datasets, file formats and the command-line driver around
//! [`infusion_core`].
//!
//! * [`data`]: IDX files, the two-Gaussians toy set, scaling and splits.
//! * [`image`]: binary PGM grids and scatter plots.
//! * [`checkpoint`]: versioned, bit-exact operator checkpoints.
//! * [`config`]: the TOML run configuration and its presets.
//! * [`report`]: CSV outputs.
//! * [`commands`]: the subcommands behind the `infusion` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod report;

pub use error::{CliError, Result};
