use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::{BlockParams, ModelConfig, ModelSnapshot, Params};
use crate::corpus::TokenizedSample;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Natural-log probabilities of each response token given its prefix, in
/// response order. Entry `r` scores token `prompt_len + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenLogProbs(pub Vec<f64>);

impl TokenLogProbs {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Per-token negative log-likelihood in nats.
    pub fn nll(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&lp| -lp)
    }

    /// Mean NLL over all response tokens.
    pub fn mean_nll(&self) -> f64 {
        self.nll().sum::<f64>() / self.0.len() as f64
    }
}

/// Post-norm activations entering the attention of one layer, `L_seq × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedStates {
    pub layer: usize,
    pub states: Array2<f64>,
}

/// Per-head causal attention probabilities of one layer. Rows are queries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSlice {
    pub layer: usize,
    pub heads: Vec<Array2<f64>>,
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut out = Array2::zeros((t, d));
    let mut inv_std = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn embed(p: &Params, ids: &[u32]) -> Array2<f64> {
    let d = p.tok_emb.ncols();
    let mut x = Array2::zeros((ids.len(), d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row.assign(&p.tok_emb.row(id as usize));
        row += &p.pos_emb.row(t);
    }
    x
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Causal multi-head attention computed one query row at a time. No
/// attention matrix outlives the row that produced it.
fn streaming_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, n_heads: usize) -> Array2<f64> {
    let (t, d) = q.dim();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut w = vec![0.0; t];
    for h in 0..n_heads {
        let cols = h * dk..(h + 1) * dk;
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        for i in 0..t {
            let qi = q.slice(s![i, cols.clone()]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let sc = dot(qi, kh.row(j)) * scale;
                w[j] = sc;
                max = max.max(sc);
            }
            let mut z = 0.0;
            for wj in w.iter_mut().take(i + 1) {
                *wj = (*wj - max).exp();
                z += *wj;
            }
            let mut orow = out.slice_mut(s![i, cols.clone()]);
            for j in 0..=i {
                orow.scaled_add(w[j] / z, &vh.row(j));
            }
        }
    }
    out
}

/// Materialized causal softmax per head: `softmax_j≤i(q_i·k_j / sqrt(d_k))`
/// with exact zeros above the diagonal.
pub(crate) fn attention_probs(q: &Array2<f64>, k: &Array2<f64>, n_heads: usize) -> Vec<Array2<f64>> {
    let (t, d) = q.dim();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    (0..n_heads)
        .map(|h| {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols]);
            let mut a = qh.dot(&kh.t());
            for i in 0..t {
                let mut row = a.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    z += row[j];
                }
                for j in 0..=i {
                    row[j] /= z;
                }
                for j in i + 1..t {
                    row[j] = 0.0;
                }
            }
            a
        })
        .collect()
}

fn mlp_out(h2: &Array2<f64>, p: &BlockParams) -> Array2<f64> {
    let mut u = h2.dot(&p.w_in);
    u += &p.b_in;
    u.mapv_inplace(gelu);
    let mut m = u.dot(&p.w_out);
    m += &p.b_out;
    m
}

fn block_infer(x: &Array2<f64>, p: &BlockParams, n_heads: usize, capture: Option<&mut Option<Array2<f64>>>) -> Array2<f64> {
    let (h1, _) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = h1.dot(&p.wq);
    let k = h1.dot(&p.wk);
    let v = h1.dot(&p.wv);
    if let Some(slot) = capture {
        *slot = Some(h1);
    }
    let ctx = streaming_attention(&q, &k, &v, n_heads);
    let x_mid = x + &ctx.dot(&p.wo);
    let (h2, _) = layer_norm(&x_mid, &p.ln2_gain, &p.ln2_bias);
    x_mid + mlp_out(&h2, p)
}

/// Log-softmax of `logits` rows evaluated at `targets`.
fn gather_logprobs(logits: &Array2<f64>, targets: &[u32]) -> Vec<f64> {
    logits
        .axis_iter(Axis(0))
        .zip(targets)
        .map(|(row, &tgt)| {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            (row[tgt as usize] - lse).min(0.0)
        })
        .collect()
}

/// Logits at the positions that predict response tokens: rows
/// `prompt_len-1 .. len-1` of the final hidden states.
pub(crate) fn response_logits(p: &Params, hf: &Array2<f64>, prompt_len: usize) -> Array2<f64> {
    let t = hf.nrows();
    let rows = hf.slice(s![prompt_len - 1..t - 1, ..]);
    let mut logits = rows.dot(&p.head);
    logits += &p.head_bias;
    logits
}

fn run_inference(model: &ModelSnapshot, sample: &TokenizedSample, capture_layer: Option<usize>) -> Result<(TokenLogProbs, Option<CapturedStates>)> {
    let cfg = model.config();
    cfg.check_sample(sample)?;
    let p = model.params();
    let mut x = embed(p, &sample.ids);
    let mut captured = None;
    for (l, block) in p.blocks.iter().enumerate() {
        let slot = if capture_layer == Some(l) { Some(&mut captured) } else { None };
        x = block_infer(&x, block, cfg.n_heads, slot);
    }
    let (hf, _) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
    let logits = response_logits(p, &hf, sample.prompt_len);
    let lps = gather_logprobs(&logits, &sample.ids[sample.prompt_len..]);
    let captured = match (capture_layer, captured) {
        (Some(layer), Some(states)) => Some(CapturedStates { layer, states }),
        _ => None,
    };
    Ok((TokenLogProbs(lps), captured))
}

/// Per-response-token log-probabilities.
pub fn forward_logprobs(model: &ModelSnapshot, sample: &TokenizedSample) -> Result<TokenLogProbs> {
    run_inference(model, sample, None).map(|(lp, _)| lp)
}

/// Same log-probabilities as [`forward_logprobs`], plus the normalized
/// hidden states entering the attention of the configured layer.
pub fn forward_with_capture(model: &ModelSnapshot, sample: &TokenizedSample) -> Result<(TokenLogProbs, CapturedStates)> {
    let layer = model.config().attn_layer_index();
    let (lp, cap) = run_inference(model, sample, Some(layer))?;
    Ok((lp, cap.expect("capture layer is validated")))
}

/// Rebuilds one layer's attention probabilities from captured states.
pub fn recompute_attention(model: &ModelSnapshot, captured: &CapturedStates, sample: &TokenizedSample) -> Result<AttentionSlice> {
    let cfg = model.config();
    let (t, d) = captured.states.dim();
    if t != sample.len() || d != cfg.d_model {
        return Err(Error::Shape(format!(
            "captured states are {t}×{d}, expected {}×{}",
            sample.len(),
            cfg.d_model
        )));
    }
    let block = model
        .params()
        .blocks
        .get(captured.layer)
        .ok_or_else(|| Error::Shape(format!("layer {} out of range", captured.layer)))?;
    let q = captured.states.dot(&block.wq);
    let k = captured.states.dot(&block.wk);
    Ok(AttentionSlice {
        layer: captured.layer,
        heads: attention_probs(&q, &k, cfg.n_heads),
    })
}

/// Head-averaged attention mass each response token places on the prompt.
pub fn attn_prompt_mass(slice: &AttentionSlice, sample: &TokenizedSample) -> Result<Vec<f64>> {
    let t = sample.len();
    if sample.prompt_len == 0 || sample.prompt_len >= t {
        return Err(Error::Index(format!(
            "prompt_len {} leaves no response in a sequence of {t}",
            sample.prompt_len
        )));
    }
    if slice.heads.is_empty() || slice.heads.iter().any(|a| a.dim() != (t, t)) {
        return Err(Error::Index(format!("attention slice does not cover {t} positions")));
    }
    let n_heads = slice.heads.len() as f64;
    Ok(sample
        .resp_range()
        .map(|i| {
            let total: f64 = slice
                .heads
                .iter()
                .map(|a| a.slice(s![i, ..sample.prompt_len]).sum())
                .sum();
            (total / n_heads).clamp(0.0, 1.0)
        })
        .collect())
}

pub(crate) struct BlockTrace {
    pub x_in: Array2<f64>,
    pub ln1: LnCache,
    pub h1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub ln2: LnCache,
    pub h2: Array2<f64>,
    pub u: Array2<f64>,
    pub g: Array2<f64>,
}

/// Forward pass keeping every intermediate needed for backpropagation.
pub(crate) struct Trace {
    pub blocks: Vec<BlockTrace>,
    pub lnf: LnCache,
    pub hf: Array2<f64>,
}

pub(crate) fn trace_forward(cfg: &ModelConfig, p: &Params, sample: &TokenizedSample) -> Result<Trace> {
    cfg.check_sample(sample)?;
    let n_heads = cfg.n_heads;
    let dk = cfg.d_head();
    let mut x = embed(p, &sample.ids);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (h1, ln1) = layer_norm(&x, &b.ln1_gain, &b.ln1_bias);
        let q = h1.dot(&b.wq);
        let k = h1.dot(&b.wk);
        let v = h1.dot(&b.wv);
        let probs = attention_probs(&q, &k, n_heads);
        let mut ctx = Array2::zeros(q.dim());
        for (h, a) in probs.iter().enumerate() {
            let cols = h * dk..(h + 1) * dk;
            ctx.slice_mut(s![.., cols.clone()]).assign(&a.dot(&v.slice(s![.., cols])));
        }
        let x_mid = &x + &ctx.dot(&b.wo);
        let (h2, ln2) = layer_norm(&x_mid, &b.ln2_gain, &b.ln2_bias);
        let mut u = h2.dot(&b.w_in);
        u += &b.b_in;
        let g = u.mapv(gelu);
        let mut m = g.dot(&b.w_out);
        m += &b.b_out;
        let x_out = &x_mid + &m;
        blocks.push(BlockTrace {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            h2,
            u,
            g,
        });
    }
    let (hf, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
    Ok(Trace { blocks, lnf, hf })
}

/// Full forward that materializes every layer's attention matrices. Serves as
/// the reference against which capture/recompute is checked.
pub fn forward_materialized(model: &ModelSnapshot, sample: &TokenizedSample) -> Result<(TokenLogProbs, Vec<AttentionSlice>)> {
    let p = model.params();
    let trace = trace_forward(model.config(), p, sample)?;
    let logits = response_logits(p, &trace.hf, sample.prompt_len);
    let lps = gather_logprobs(&logits, &sample.ids[sample.prompt_len..]);
    let slices = trace
        .blocks
        .into_iter()
        .enumerate()
        .map(|(layer, b)| AttentionSlice { layer, heads: b.probs })
        .collect();
    Ok((TokenLogProbs(lps), slices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Special, VOCAB_SIZE};

    fn small_cfg() -> ModelConfig {
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

    fn sample(prompt_len: usize, len: usize) -> TokenizedSample {
        let ids = (0..len).map(|i| Special::COUNT + (i as u32 * 7) % 200).collect();
        TokenizedSample::new(0, ids, prompt_len).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_logprobs() {
        let m = ModelSnapshot::zeros(small_cfg()).unwrap();
        let lp = forward_logprobs(&m, &sample(3, 9)).unwrap();
        assert_eq!(lp.len(), 6);
        let expected = -(VOCAB_SIZE as f64).ln();
        for v in lp.values() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn capture_does_not_change_logprobs() {
        let m = ModelSnapshot::init(small_cfg(), 3).unwrap();
        let s = sample(4, 12);
        let plain = forward_logprobs(&m, &s).unwrap();
        let (captured_lp, cap) = forward_with_capture(&m, &s).unwrap();
        assert!(plain.values().iter().zip(captured_lp.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(cap.layer, 1);
        assert_eq!(cap.states.dim(), (12, 16));
    }

    #[test]
    fn capture_at_layer_zero_is_normalized_embedding() {
        let m = ModelSnapshot::init(small_cfg(), 5).unwrap().with_attn_layer(0).unwrap();
        let s = sample(2, 6);
        let (_, cap) = forward_with_capture(&m, &s).unwrap();
        let p = m.params();
        let x = embed(p, &s.ids);
        let (expected, _) = layer_norm(&x, &p.blocks[0].ln1_gain, &p.blocks[0].ln1_bias);
        assert_eq!(cap.states, expected);
    }

    #[test]
    fn zero_qk_gives_uniform_rows_and_prompt_mass() {
        let cfg = small_cfg();
        let mut params = Params::init(&cfg, 1);
        for b in params.blocks.iter_mut() {
            b.wq.fill(0.0);
            b.wk.fill(0.0);
        }
        let m = ModelSnapshot::new(cfg, params, 0).unwrap();
        let s = sample(3, 7);
        let (_, cap) = forward_with_capture(&m, &s).unwrap();
        let slice = recompute_attention(&m, &cap, &s).unwrap();
        for a in &slice.heads {
            for i in 0..7 {
                for j in 0..7 {
                    let expected = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                    assert!((a[[i, j]] - expected).abs() < 1e-15);
                }
            }
        }
        let mass = attn_prompt_mass(&slice, &s).unwrap();
        // Response position 4 sees 5 keys, 3 of them prompt.
        assert!((mass[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn head_average() {
        let s = TokenizedSample::new(0, vec![5, 6, 7], 1).unwrap();
        let mut a1 = Array2::zeros((3, 3));
        let mut a2 = Array2::zeros((3, 3));
        a1[[0, 0]] = 1.0;
        a2[[0, 0]] = 1.0;
        a1[[1, 0]] = 0.2;
        a1[[1, 1]] = 0.8;
        a2[[1, 0]] = 0.8;
        a2[[1, 1]] = 0.2;
        a1[[2, 2]] = 1.0;
        a2[[2, 2]] = 1.0;
        let slice = AttentionSlice {
            layer: 0,
            heads: vec![a1, a2],
        };
        let mass = attn_prompt_mass(&slice, &s).unwrap();
        assert_eq!(mass.len(), 2);
        assert!((mass[0] - 0.5).abs() < 1e-15);
        assert_eq!(mass[1], 0.0);
    }

    #[test]
    fn prompt_mass_rejects_bad_slices() {
        let s = TokenizedSample::new(0, vec![5, 6, 7], 1).unwrap();
        let slice = AttentionSlice {
            layer: 0,
            heads: vec![Array2::zeros((2, 2))],
        };
        assert!(matches!(attn_prompt_mass(&slice, &s), Err(Error::Index(_))));
    }

    #[test]
    fn rejects_oversized_samples() {
        let m = ModelSnapshot::zeros(small_cfg()).unwrap();
        assert!(matches!(forward_logprobs(&m, &sample(3, 40)), Err(Error::Shape(_))));
    }

    #[test]
    fn capture_memory_is_one_activation() {
        let cfg = ModelConfig {
            d_model: 128,
            max_seq_len: 256,
            ..ModelConfig::default()
        };
        let m = ModelSnapshot::init(cfg, 0).unwrap();
        let ids = (0..256).map(|i| 5 + (i % 250) as u32).collect();
        let s = TokenizedSample::new(0, ids, 10).unwrap();
        let (_, cap) = forward_with_capture(&m, &s).unwrap();
        let layer_activation_bytes = 256 * 128 * std::mem::size_of::<f64>();
        let captured_bytes = cap.states.len() * std::mem::size_of::<f64>();
        assert!(captured_bytes < 2 * layer_activation_bytes);
    }
}
