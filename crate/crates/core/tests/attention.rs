mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sstoken_core::corpus::{TokenizedSample, VOCAB_SIZE};
use sstoken_core::model::{
    attn_prompt_mass, forward_logprobs, forward_materialized, forward_with_capture, recompute_attention, ModelConfig,
};

#[test]
fn recompute_matches_materialized_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut cfg = common::small_config();
        cfg.attn_layer = Some(rng.random_range(0..cfg.n_layers));
        let model = common::rough_model(&cfg, trial);
        let sample = common::random_sample(&mut rng, 0, cfg.max_seq_len);
        let (_, cap) = forward_with_capture(&model, &sample).unwrap();
        let slice = recompute_attention(&model, &cap, &sample).unwrap();
        let (_, all) = forward_materialized(&model, &sample).unwrap();
        let full = &all[cfg.attn_layer.unwrap()];
        assert_eq!(slice.layer, full.layer);
        for (a, b) in slice.heads.iter().zip(&full.heads) {
            worst = worst.max((a - b).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v)));
        }
    }
    assert!(worst <= 1e-6, "max abs diff {worst:e}");
}

#[test]
fn recompute_rejects_mismatched_capture() {
    let cfg = common::small_config();
    let model = common::rough_model(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = common::random_sample(&mut rng, 0, 10);
    let b = TokenizedSample::new(1, vec![9; a.len() + 1], 1).unwrap();
    let (_, cap) = forward_with_capture(&model, &a).unwrap();
    assert!(recompute_attention(&model, &cap, &b).is_err());
}

#[test]
fn default_layer_is_deepest() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.attn_layer_index(), cfg.n_layers - 1);
    assert_eq!(cfg.vocab_size, VOCAB_SIZE);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_causal_distributions(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::small_config();
        let model = common::rough_model(&cfg, seed);
        let sample = common::random_sample(&mut rng, 0, cfg.max_seq_len);
        let (_, cap) = forward_with_capture(&model, &sample).unwrap();
        let slice = recompute_attention(&model, &cap, &sample).unwrap();
        for a in &slice.heads {
            for i in 0..sample.len() {
                let row = a.row(i);
                prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
            }
        }
        let mass = attn_prompt_mass(&slice, &sample).unwrap();
        prop_assert_eq!(mass.len(), sample.resp_len());
        prop_assert!(mass.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_predictions(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = common::small_config();
        let model = common::rough_model(&cfg, seed % 7);
        let sample = common::random_sample(&mut rng, 0, cfg.max_seq_len);
        let p = rng.random_range(0..sample.len());
        let mut ids = sample.ids.clone();
        ids[p] = 5 + (ids[p] - 5 + 1 + rng.random_range(0..200)) % 256;
        let changed = TokenizedSample::new(0, ids, sample.prompt_len).unwrap();
        let a = forward_logprobs(&model, &sample).unwrap();
        let b = forward_logprobs(&model, &changed).unwrap();
        // Response entry r scores absolute position prompt_len + r from
        // logits at position prompt_len + r − 1.
        for r in 0..sample.resp_len() {
            if sample.prompt_len + r < p {
                prop_assert_eq!(a.values()[r].to_bits(), b.values()[r].to_bits());
            }
        }
    }
}
