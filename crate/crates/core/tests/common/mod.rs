#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sstoken_core::corpus::{Special, TokenizedSample, VOCAB_SIZE};
use sstoken_core::model::{ModelConfig, ModelSnapshot, Params};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        attn_layer: None,
    }
}

/// A model with O(0.3) random parameters, so every path carries signal.
pub fn rough_model(cfg: &ModelConfig, seed: u64) -> ModelSnapshot {
    let mut params = Params::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let noise = Normal::new(0.0, 0.3).unwrap();
    params.for_each_mut(|_, s| s.iter_mut().for_each(|x| *x += noise.sample(&mut rng)));
    ModelSnapshot::new(cfg.clone(), params, 0).unwrap()
}

pub fn random_sample(rng: &mut ChaCha8Rng, id: usize, max_len: usize) -> TokenizedSample {
    let len = rng.random_range(2..=max_len);
    let prompt_len = rng.random_range(1..len);
    let ids = (0..len)
        .map(|_| rng.random_range(Special::COUNT..VOCAB_SIZE as u32))
        .collect();
    TokenizedSample::new(id, ids, prompt_len).unwrap()
}
