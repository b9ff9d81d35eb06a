//! Token-level data selection for supervised fine-tuning.
//!
//! A small decoder-only transformer, trained on prompt/response pairs where
//! only a selected subset of response tokens contributes to the loss. The
//! selection score mixes the per-sample min-max normalized loss improvement
//! of the current model over a history snapshot with the attention mass each
//! response token places on the prompt at one layer. Excess-loss baselines
//! against a reference model, random selection and full-data training are
//! provided for comparison.

pub mod corpus;
pub mod error;
pub mod history;
pub mod model;
pub mod select;
pub mod train;

pub use error::{Error, Result};
