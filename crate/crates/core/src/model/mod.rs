//! Decoder-only causal transformer: parameters, snapshots, forward passes,
//! attention capture/recompute, and checkpoints.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, Role};
pub use forward::{
    attn_prompt_mass, forward_logprobs, forward_materialized, forward_with_capture, recompute_attention,
    AttentionSlice, CapturedStates, TokenLogProbs,
};
pub(crate) use forward::{gelu_grad as forward_gelu_grad, trace_forward, BlockTrace, LnCache};
pub use params::{BlockParams, Params};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenizedSample, VOCAB_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Layer whose attention feeds the prompt-mass score. `None` means the
    /// deepest layer.
    pub attn_layer: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            attn_layer: None,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn attn_layer_index(&self) -> usize {
        self.attn_layer.unwrap_or(self.n_layers.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.attn_layer_index() >= self.n_layers {
            return Err(Error::Config(format!(
                "attn_layer {} outside [0, {})",
                self.attn_layer_index(),
                self.n_layers
            )));
        }
        Ok(())
    }

    pub(crate) fn check_sample(&self, sample: &TokenizedSample) -> Result<()> {
        if sample.len() > self.max_seq_len {
            return Err(Error::Shape(format!(
                "sample length {} exceeds max_seq_len {}",
                sample.len(),
                self.max_seq_len
            )));
        }
        if sample.prompt_len == 0 || sample.prompt_len >= sample.len() {
            return Err(Error::Shape(format!(
                "prompt_len {} invalid for sample of length {}",
                sample.prompt_len,
                sample.len()
            )));
        }
        if let Some(&bad) = sample.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocab of {}", self.vocab_size)));
        }
        Ok(())
    }
}

/// An immutable model state. Parameter updates produce new snapshots.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    config: ModelConfig,
    params: Arc<Params>,
    version: u64,
}

impl ModelSnapshot {
    pub fn new(config: ModelConfig, params: Params, version: u64) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if let Some(name) = params.first_non_finite() {
            return Err(Error::Shape(format!("parameter {name} contains NaN/Inf")));
        }
        Ok(ModelSnapshot {
            config,
            params: Arc::new(params),
            version,
        })
    }

    /// Seeded random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Self::new(config, params, 0)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Self::new(config, params, 0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Returns a snapshot sharing this configuration with new parameters.
    pub fn with_params(&self, params: Params, version: u64) -> Result<Self> {
        Self::new(self.config.clone(), params, version)
    }

    /// Same parameters, different attention layer.
    pub fn with_attn_layer(&self, layer: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.attn_layer = Some(layer);
        config.validate()?;
        Ok(ModelSnapshot {
            config,
            params: Arc::clone(&self.params),
            version: self.version,
        })
    }

    /// Bitwise parameter equality.
    pub fn same_params(&self, other: &ModelSnapshot) -> bool {
        self.params.bitwise_eq(&other.params)
    }
}
