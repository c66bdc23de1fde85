//! Configuration, experiment assembly and subcommands of the `ntkfed` binary.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod verify;
pub mod weights;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
