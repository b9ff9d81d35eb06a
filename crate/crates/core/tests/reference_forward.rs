//! Scalar-loop reimplementation of the forward pass, written independently
//! of the library's matrix code, used as an oracle for log-probabilities.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sstoken_core::corpus::TokenizedSample;
use sstoken_core::model::{forward_logprobs, forward_materialized, ModelSnapshot};

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / denom * gain[j] + bias[j])
        .collect()
}

fn matvec(x: &[f64], w: &ndarray::Array2<f64>) -> Vec<f64> {
    let (rows, cols) = w.dim();
    (0..cols)
        .map(|c| (0..rows).map(|r| x[r] * w[[r, c]]).sum())
        .collect()
}

fn gelu(u: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (c * (u + 0.044715 * u.powi(3))).tanh())
}

fn reference_logprobs(model: &ModelSnapshot, sample: &TokenizedSample) -> Vec<f64> {
    let cfg = model.config();
    let p = model.params();
    let t = sample.len();
    let d = cfg.d_model;
    let dk = d / cfg.n_heads;
    let mut x: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..d).map(|j| p.tok_emb[[sample.ids[i] as usize, j]] + p.pos_emb[[i, j]]).collect())
        .collect();
    for b in &p.blocks {
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, b.ln1_gain.as_slice().unwrap(), b.ln1_bias.as_slice().unwrap())).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &b.wq)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &b.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &b.wv)).collect();
        let mut ctx = vec![vec![0.0; d]; t];
        for head in 0..cfg.n_heads {
            let off = head * dk;
            for i in 0..t {
                let logits: Vec<f64> = (0..=i)
                    .map(|j| (0..dk).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..=i {
                    let w = (logits[j] - m).exp() / z;
                    for c in 0..dk {
                        ctx[i][off + c] += w * v[j][off + c];
                    }
                }
            }
        }
        for i in 0..t {
            let o = matvec(&ctx[i], &b.wo);
            for j in 0..d {
                x[i][j] += o[j];
            }
            let h2 = layer_norm(&x[i], b.ln2_gain.as_slice().unwrap(), b.ln2_bias.as_slice().unwrap());
            let mut u = matvec(&h2, &b.w_in);
            for (f, val) in u.iter_mut().enumerate() {
                *val = gelu(*val + b.b_in[f]);
            }
            let m = matvec(&u, &b.w_out);
            for j in 0..d {
                x[i][j] += m[j] + b.b_out[j];
            }
        }
    }
    (sample.prompt_len..t)
        .map(|i| {
            let hf = layer_norm(&x[i - 1], p.lnf_gain.as_slice().unwrap(), p.lnf_bias.as_slice().unwrap());
            let logits: Vec<f64> = matvec(&hf, &p.head).iter().zip(p.head_bias.iter()).map(|(a, b)| a + b).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
            logits[sample.ids[i] as usize] - lse
        })
        .collect()
}

#[test]
fn forward_matches_scalar_reference() {
    let cfg = common::small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let model = common::rough_model(&cfg, seed);
        let sample = common::random_sample(&mut rng, 0, cfg.max_seq_len);
        let fast = forward_logprobs(&model, &sample).unwrap();
        let traced = forward_materialized(&model, &sample).unwrap().0;
        let reference = reference_logprobs(&model, &sample);
        assert_eq!(fast.len(), sample.resp_len());
        for ((a, b), r) in fast.values().iter().zip(traced.values()).zip(&reference) {
            assert!(*a <= 0.0 && a.is_finite());
            worst = worst.max((a - r).abs()).max((b - r).abs());
        }
    }
    assert!(worst <= 1e-10, "max abs diff {worst:e}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = common::small_config();
    let model = common::rough_model(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = common::random_sample(&mut rng, 0, 20);
    let a = forward_logprobs(&model, &sample).unwrap();
    let b = forward_logprobs(&model.clone(), &sample).unwrap();
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
