//! Driver for training toy classifiers and crafting, scoring and inspecting
//! universal perturbations. The `psp-uap` binary is a thin flag parser over
//! [`commands`].

pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod pool;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
