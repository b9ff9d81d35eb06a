use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// Projections are stored input-major: `x (T×D) · wq (D×D)`.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// Every trainable array of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    pub head: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl BlockParams {
    fn zeros(d: usize, f: usize) -> Self {
        BlockParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_in: Array2::zeros((d, f)),
            b_in: Array1::zeros(f),
            w_out: Array2::zeros((f, d)),
            b_out: Array1::zeros(d),
        }
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl Params {
    /// All-zero parameters, including layer-norm gains. Such a model predicts
    /// the uniform distribution everywhere.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        Params {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((cfg.max_seq_len, d)),
            blocks: (0..cfg.n_layers).map(|_| BlockParams::zeros(d, f)).collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            head: Array2::zeros((d, v)),
            head_bias: Array1::zeros(v),
        }
    }

    /// GPT-2 style init: N(0, 0.02) weights, residual output projections
    /// scaled by 1/sqrt(2·n_layers), unit norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = normal_matrix(v, d, std, &mut rng);
        let pos_emb = normal_matrix(cfg.max_seq_len, d, 0.01, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                wq: normal_matrix(d, d, std, &mut rng),
                wk: normal_matrix(d, d, std, &mut rng),
                wv: normal_matrix(d, d, std, &mut rng),
                wo: normal_matrix(d, d, resid_std, &mut rng),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w_in: normal_matrix(d, f, std, &mut rng),
                b_in: Array1::zeros(f),
                w_out: normal_matrix(f, d, resid_std, &mut rng),
                b_out: Array1::zeros(d),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Array1::ones(d),
            lnf_bias: Array1::zeros(d),
            head: normal_matrix(d, v, std, &mut rng),
            head_bias: Array1::zeros(v),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, x| x.fill(0.0));
        z
    }

    /// Named, shaped, read-only views in canonical order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn t1(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        fn t2(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![t2("tok_emb".into(), &self.tok_emb), t2("pos_emb".into(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push(t1(p("ln1.gain"), &b.ln1_gain));
            out.push(t1(p("ln1.bias"), &b.ln1_bias));
            out.push(t2(p("attn.wq"), &b.wq));
            out.push(t2(p("attn.wk"), &b.wk));
            out.push(t2(p("attn.wv"), &b.wv));
            out.push(t2(p("attn.wo"), &b.wo));
            out.push(t1(p("ln2.gain"), &b.ln2_gain));
            out.push(t1(p("ln2.bias"), &b.ln2_bias));
            out.push(t2(p("mlp.w_in"), &b.w_in));
            out.push(t1(p("mlp.b_in"), &b.b_in));
            out.push(t2(p("mlp.w_out"), &b.w_out));
            out.push(t1(p("mlp.b_out"), &b.b_out));
        }
        out.push(t1("ln_f.gain".into(), &self.lnf_gain));
        out.push(t1("ln_f.bias".into(), &self.lnf_bias));
        out.push(t2("head.weight".into(), &self.head));
        out.push(t1("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable flat views in the same order as [`Params::tensors`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        fn s<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = vec![s(&mut self.tok_emb), s(&mut self.pos_emb)];
        for b in self.blocks.iter_mut() {
            out.push(s(&mut b.ln1_gain));
            out.push(s(&mut b.ln1_bias));
            out.push(s(&mut b.wq));
            out.push(s(&mut b.wk));
            out.push(s(&mut b.wv));
            out.push(s(&mut b.wo));
            out.push(s(&mut b.ln2_gain));
            out.push(s(&mut b.ln2_bias));
            out.push(s(&mut b.w_in));
            out.push(s(&mut b.b_in));
            out.push(s(&mut b.w_out));
            out.push(s(&mut b.b_out));
        }
        out.push(s(&mut self.lnf_gain));
        out.push(s(&mut self.lnf_bias));
        out.push(s(&mut self.head));
        out.push(s(&mut self.head_bias));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        for (i, s) in self.slices_mut().into_iter().enumerate() {
            f(i, s);
        }
    }

    /// Calls `f(index, self_slice, other_slice)` for each tensor pair.
    pub fn zip_mut(&mut self, other: &Params, mut f: impl FnMut(usize, &mut [f64], &[f64])) {
        let others = other.tensors();
        for (i, (dst, (_, _, src))) in self.slices_mut().into_iter().zip(others).enumerate() {
            f(i, dst, src);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        self.zip_mut(other, |_, a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        });
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|_, a| a.iter_mut().for_each(|x| *x *= c));
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, _, d)| d.iter().any(|x| !x.is_finite()))
            .map(|(n, _, _)| n)
    }

    pub fn bitwise_eq(&self, other: &Params) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, sa, da), (nb, sb, db))| {
                na == nb && sa == sb && da.iter().zip(db.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Expected (name, shape) list for a configuration.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Params::zeros(cfg)
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Params::layout(cfg);
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, ash, _)) in expected.iter().zip(&actual) {
            if en != an || es != ash {
                return Err(Error::Shape(format!("{an} has shape {ash:?}, expected {en} {es:?}")));
            }
        }
        Ok(())
    }
}
