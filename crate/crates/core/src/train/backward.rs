//! Reverse-mode gradients of the masked loss through the whole model.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};

use super::MaskedBatch;
use crate::corpus::TokenizedSample;
use crate::error::Result;
use crate::model::{trace_forward, BlockParams, BlockTrace, LnCache, ModelConfig, ModelSnapshot, Params};
use crate::select::SelectionMask;

fn ln_backward(dy: &Array2<f64>, cache: &LnCache, gain: &Array1<f64>, dgain: &mut Array1<f64>, dbias: &mut Array1<f64>) -> Array2<f64> {
    let (t, d) = dy.dim();
    let inv_d = 1.0 / d as f64;
    let mut dx = Array2::zeros((t, d));
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let (mut sum, mut sum_x) = (0.0, 0.0);
        for j in 0..d {
            let g = dy[[i, j]];
            let xh = cache.xhat[[i, j]];
            dgain[j] += g * xh;
            dbias[j] += g;
            dxhat[j] = g * gain[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh;
        }
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[[i, j]] = is * (dxhat[j] - inv_d * sum - cache.xhat[[i, j]] * inv_d * sum_x);
        }
    }
    dx
}

/// `acc += a^T · b`
fn add_at_b(acc: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

fn block_backward(dx_out: Array2<f64>, tr: &BlockTrace, p: &BlockParams, g: &mut BlockParams, n_heads: usize) -> Array2<f64> {
    // MLP branch: x_out = x_mid + gelu(h2·w_in + b_in)·w_out + b_out
    add_at_b(&mut g.w_out, &tr.g, &dx_out);
    g.b_out += &dx_out.sum_axis(Axis(0));
    let mut du = dx_out.dot(&p.w_out.t());
    du.zip_mut_with(&tr.u, |d, &u| *d *= crate::model::forward_gelu_grad(u));
    add_at_b(&mut g.w_in, &tr.h2, &du);
    g.b_in += &du.sum_axis(Axis(0));
    let dh2 = du.dot(&p.w_in.t());
    let mut dx_mid = ln_backward(&dh2, &tr.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    dx_mid += &dx_out;

    // Attention branch: x_mid = x_in + ctx·wo
    add_at_b(&mut g.wo, &tr.ctx, &dx_mid);
    let dctx = dx_mid.dot(&p.wo.t());
    let (t, d) = tr.q.dim();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dkm = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, a) in tr.probs.iter().enumerate() {
        let cols = h * dk..(h + 1) * dk;
        let dctx_h = dctx.slice(s![.., cols.clone()]);
        let vh = tr.v.slice(s![.., cols.clone()]);
        let mut ds = dctx_h.dot(&vh.t());
        dv.slice_mut(s![.., cols.clone()]).assign(&a.t().dot(&dctx_h));
        // softmax backward, rows restricted to the causal prefix
        for i in 0..t {
            let mut row = ds.row_mut(i);
            let arow = a.row(i);
            let dot: f64 = (0..=i).map(|j| arow[j] * row[j]).sum();
            for j in 0..=i {
                row[j] = arow[j] * (row[j] - dot) * scale;
            }
            for j in i + 1..t {
                row[j] = 0.0;
            }
        }
        let qh = tr.q.slice(s![.., cols.clone()]);
        let kh = tr.k.slice(s![.., cols.clone()]);
        dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
        dkm.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
    }
    add_at_b(&mut g.wq, &tr.h1, &dq);
    add_at_b(&mut g.wk, &tr.h1, &dkm);
    add_at_b(&mut g.wv, &tr.h1, &dv);
    let mut dh1 = dq.dot(&p.wq.t());
    general_mat_mul(1.0, &dkm, &p.wk.t(), 1.0, &mut dh1);
    general_mat_mul(1.0, &dv, &p.wv.t(), 1.0, &mut dh1);
    let mut dx_in = ln_backward(&dh1, &tr.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    dx_in += &dx_mid;
    debug_assert_eq!(dx_in.dim(), tr.x_in.dim());
    dx_in
}

/// Loss contribution and logit gradients of the selected rows.
///
/// Returns `(sum of selected NLL, rows, dlogits)` where `rows` are indices into
/// the response and `dlogits` is `weight·(softmax − onehot)` for those rows.
fn selected_logit_grads(p: &Params, hf: &Array2<f64>, sample: &TokenizedSample, mask: &SelectionMask, weight: f64) -> (f64, Vec<usize>, Array2<f64>) {
    let rows: Vec<usize> = mask.positions().collect();
    let hf_rows = hf.select(Axis(0), &rows.iter().map(|r| sample.prompt_len - 1 + r).collect::<Vec<_>>());
    let mut logits = hf_rows.dot(&p.head);
    logits += &p.head_bias;
    let mut nll = 0.0;
    for (n, &r) in rows.iter().enumerate() {
        let target = sample.ids[sample.prompt_len + r] as usize;
        let mut row = logits.row_mut(n);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let target_logit = row[target];
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        nll += z.ln() + max - target_logit;
        row.mapv_inplace(|e| e / z * weight);
        row[target] -= weight;
    }
    (nll, rows, logits)
}

fn sample_backward(cfg: &ModelConfig, p: &Params, sample: &TokenizedSample, mask: &SelectionMask, weight: f64, grads: &mut Params) -> Result<f64> {
    let trace = trace_forward(cfg, p, sample)?;
    let (nll, rows, dlogits) = selected_logit_grads(p, &trace.hf, sample, mask, weight);

    let abs_rows: Vec<usize> = rows.iter().map(|r| sample.prompt_len - 1 + r).collect();
    let hf_rows = trace.hf.select(Axis(0), &abs_rows);
    add_at_b(&mut grads.head, &hf_rows, &dlogits);
    grads.head_bias += &dlogits.sum_axis(Axis(0));
    let dhf_rows = dlogits.dot(&p.head.t());
    let mut dhf = Array2::zeros(trace.hf.dim());
    for (n, &r) in abs_rows.iter().enumerate() {
        dhf.row_mut(r).assign(&dhf_rows.row(n));
    }
    let mut dx = ln_backward(&dhf, &trace.lnf, &p.lnf_gain, &mut grads.lnf_gain, &mut grads.lnf_bias);
    for ((tr, bp), bg) in trace.blocks.iter().zip(&p.blocks).zip(grads.blocks.iter_mut()).rev() {
        dx = block_backward(dx, tr, bp, bg, cfg.n_heads);
    }
    for (t, &id) in sample.ids.iter().enumerate() {
        let row = dx.row(t);
        let mut te = grads.tok_emb.row_mut(id as usize);
        te += &row;
        let mut pe = grads.pos_emb.row_mut(t);
        pe += &row;
    }
    Ok(nll)
}

/// Loss and gradients of the masked loss w.r.t. every parameter.
///
/// Samples are processed in batch order and accumulated into one gradient
/// set, so the result is deterministic.
pub fn backward(model: &ModelSnapshot, batch: &MaskedBatch) -> Result<(f64, Params)> {
    backward_scaled(model, batch, 1.0)
}

/// [`backward`] for the loss multiplied by `scale`.
pub fn backward_scaled(model: &ModelSnapshot, batch: &MaskedBatch, scale: f64) -> Result<(f64, Params)> {
    batch.check_nonempty_masks()?;
    let p = model.params();
    let cfg = model.config();
    let mut grads = p.zeros_like();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (s, m) in batch.samples.iter().zip(&batch.masks) {
        let k = m.positions().count() as f64;
        let nll = sample_backward(cfg, p, s, m, scale / (k * n), &mut grads)?;
        loss += nll / k;
    }
    Ok((scale * loss / n, grads))
}

/// Gradient of one sample's masked loss w.r.t. the logits of every response
/// row (`L_resp × vocab`). Rows of masked-out tokens are zero.
pub fn response_logit_grads(model: &ModelSnapshot, sample: &TokenizedSample, mask: &SelectionMask) -> Result<Array2<f64>> {
    let p = model.params();
    let trace = trace_forward(model.config(), p, sample)?;
    let k = mask.positions().count().max(1) as f64;
    let (_, rows, dlogits) = selected_logit_grads(p, &trace.hf, sample, mask, 1.0 / k);
    let mut full = Array2::zeros((sample.resp_len(), model.config().vocab_size));
    for (n, &r) in rows.iter().enumerate() {
        full.row_mut(r).assign(&dlogits.row(n));
    }
    Ok(full)
}
