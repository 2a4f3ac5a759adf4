//! Command surface for few-shot GAN transfer: configuration, checkpoints,
//! dataset ingestion, toy domains, and the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod toys;

pub use error::CliError;
