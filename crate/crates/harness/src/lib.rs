//! Experiment harness: configs, run directories, manifests and image output.

pub mod config;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod pipeline;
pub mod schema;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
