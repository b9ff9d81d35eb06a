#![allow(dead_code)]

use std::path::Path;

use sstoken_core::model::ModelConfig;
use sstoken_lab::config::{DataConfig, RunConfig};
use sstoken_lab::synth::{gen_synthetic_corpus, CorpusFiles, SynthConfig};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

pub fn corpus(dir: &Path, n_train: usize) -> CorpusFiles {
    let cfg = SynthConfig {
        n_train,
        n_heldout: 20,
        noise: 0.3,
        seed: 5,
        ..SynthConfig::default()
    };
    gen_synthetic_corpus(&cfg, &dir.join("data")).unwrap()
}

pub fn tiny_run(files: &CorpusFiles) -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(),
        batch_size: 4,
        data: DataConfig {
            train: files.train.clone(),
            heldout: Some(files.heldout.clone()),
            train_noise: Some(files.train_noise.clone()),
        },
        ..RunConfig::default()
    };
    cfg.optimizer.lr = 1e-3;
    cfg
}
