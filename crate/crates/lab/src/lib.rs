//! Experiment harness for token-selection fine-tuning: synthetic noisy
//! corpora, run configs and sweeps, metrics, summaries and selection
//! visualizations.

pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod render;
pub mod summary;
pub mod synth;

pub use error::{LabError, Result};
