//! Token scoring and selection: excess loss, retrospective excess loss,
//! attention prompt mass, score fusion and top-ρ masks.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenizedSample};
use crate::error::{Error, Result};
use crate::model::{
    attn_prompt_mass, forward_logprobs, forward_with_capture, recompute_attention, ModelSnapshot, TokenLogProbs,
};

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_RHO: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Full,
    Random,
    Rho1,
    TokencleaningGlobal,
    Sstoken,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 5] = [
        SelectorKind::Full,
        SelectorKind::Random,
        SelectorKind::Rho1,
        SelectorKind::TokencleaningGlobal,
        SelectorKind::Sstoken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectorKind::Full => "full",
            SelectorKind::Random => "random",
            SelectorKind::Rho1 => "rho1",
            SelectorKind::TokencleaningGlobal => "tokencleaning_global",
            SelectorKind::Sstoken => "sstoken",
        }
    }

    /// Whether the selector scores against an external reference model.
    pub fn needs_reference(self) -> bool {
        matches!(self, SelectorKind::Rho1 | SelectorKind::TokencleaningGlobal)
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown selector {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorSpec {
    pub kind: SelectorKind,
    pub gamma: f64,
    pub rho: f64,
    /// Attention layer override; `None` uses the model's configured layer.
    pub layer: Option<usize>,
    /// Min-max normalize the attention score per sample before fusion.
    pub normalize_attn: bool,
    /// Seed for the random selector's draws.
    pub seed: u64,
}

impl Default for SelectorSpec {
    fn default() -> Self {
        SelectorSpec {
            kind: SelectorKind::Sstoken,
            gamma: DEFAULT_GAMMA,
            rho: DEFAULT_RHO,
            layer: None,
            normalize_attn: false,
            seed: 0,
        }
    }
}

impl SelectorSpec {
    pub fn new(kind: SelectorKind) -> Self {
        SelectorSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Domain(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Domain(format!("rho {} outside (0, 1]", self.rho)));
        }
        Ok(())
    }
}

/// Per-response-token scores for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub rel: Vec<f64>,
    pub rel_norm: Vec<f64>,
    pub attn: Vec<f64>,
    pub fused: Vec<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub bits: Vec<bool>,
    pub k: usize,
    pub ratio: f64,
}

impl SelectionMask {
    pub fn full(len: usize) -> Self {
        SelectionMask {
            bits: vec![true; len],
            k: len,
            ratio: 1.0,
        }
    }

    pub fn from_bits(bits: Vec<bool>, ratio: f64) -> Self {
        let k = bits.iter().filter(|&&b| b).count();
        SelectionMask { bits, k, ratio }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Selected indices in response order.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(s: &str, ratio: f64) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Format(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_bits(bits, ratio))
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// `EL = L_cur − L_ref` per token.
pub fn excess_loss(cur: &TokenLogProbs, reference: &TokenLogProbs) -> Result<Vec<f64>> {
    check_lengths(cur.len(), reference.len())?;
    Ok(cur.nll().zip(reference.nll()).map(|(c, r)| c - r).collect())
}

/// `REL = L_his − L_cur` per token; positive where the current model improved.
pub fn retrospective_excess_loss(his: &TokenLogProbs, cur: &TokenLogProbs) -> Result<Vec<f64>> {
    check_lengths(his.len(), cur.len())?;
    Ok(his.nll().zip(cur.nll()).map(|(h, c)| h - c).collect())
}

/// Per-sample min-max normalization onto [0, 1]. A constant vector maps to
/// 0.5 everywhere.
pub fn normalize_rel(rel: &[f64]) -> Vec<f64> {
    let (min, max) = rel
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max == min {
        return vec![0.5; rel.len()];
    }
    let range = max - min;
    rel.iter().map(|&v| ((v - min) / range).clamp(0.0, 1.0)).collect()
}

/// `γ·rel_norm + (1−γ)·attn`.
pub fn fuse_scores(rel_norm: &[f64], attn: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_lengths(rel_norm.len(), attn.len())?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma {gamma} outside [0, 1]")));
    }
    let in_unit = |v: &f64| (0.0..=1.0).contains(v);
    if !rel_norm.iter().all(in_unit) || !attn.iter().all(in_unit) {
        return Err(Error::Domain("fusion inputs must lie in [0, 1]".into()));
    }
    Ok(rel_norm
        .iter()
        .zip(attn)
        .map(|(&r, &a)| (gamma * r + (1.0 - gamma) * a).clamp(0.0, 1.0))
        .collect())
}

/// Per-sample selection budget: `max(1, round(ρ·len))`, rounding halves up,
/// capped at `len`.
pub fn selection_count(rho: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    ((rho * len as f64).round() as usize).clamp(1, len)
}

/// Descending by score, ties to the earlier position.
fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Marks the `selection_count(ρ, len)` highest scores.
pub fn select_topk(scores: &[f64], rho: f64) -> SelectionMask {
    let k = selection_count(rho, scores.len());
    let mut order: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    order.sort_by(|&a, &b| rank_order(a, b));
    let mut bits = vec![false; scores.len()];
    for &(i, _) in order.iter().take(k) {
        bits[i] = true;
    }
    SelectionMask { bits, k, ratio: rho }
}

/// Pool-wide budget: `ceil(ρ·N)` over all tokens, with a small slack so
/// that products like `0.6·5` do not round up past the intended integer.
pub fn global_selection_count(rho: f64, total: usize) -> usize {
    (((rho * total as f64) - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Selects the globally highest `ceil(ρ·N)` scores across a pool of samples.
/// Ties go to the earlier sample, then the earlier position. Samples may end
/// up with an empty mask.
pub fn select_global_topk(pool: &[Vec<f64>], rho: f64) -> Vec<SelectionMask> {
    let total: usize = pool.iter().map(Vec::len).sum();
    let budget = global_selection_count(rho, total);
    let mut all: Vec<(usize, usize, f64)> = pool
        .iter()
        .enumerate()
        .flat_map(|(s, v)| v.iter().enumerate().map(move |(i, &x)| (s, i, x)))
        .collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut bits: Vec<Vec<bool>> = pool.iter().map(|v| vec![false; v.len()]).collect();
    for &(s, i, _) in all.iter().take(budget) {
        bits[s][i] = true;
    }
    bits.into_iter().map(|b| SelectionMask::from_bits(b, rho)).collect()
}

/// Attention prompt mass at the selector's layer, plus current log-probs,
/// from one captured forward and a single-layer recompute.
pub fn attention_and_logprobs(cur: &ModelSnapshot, sample: &TokenizedSample, layer: Option<usize>) -> Result<(TokenLogProbs, Vec<f64>)> {
    let model;
    let cur = match layer {
        Some(l) if l != cur.config().attn_layer_index() => {
            model = cur.with_attn_layer(l)?;
            &model
        }
        _ => cur,
    };
    let (lp, captured) = forward_with_capture(cur, sample)?;
    let slice = recompute_attention(cur, &captured, sample)?;
    let attn = attn_prompt_mass(&slice, sample)?;
    Ok((lp, attn))
}

/// Fused ssToken scores from precomputed pieces.
pub fn sstoken_scores(cur_lp: &TokenLogProbs, his_lp: &TokenLogProbs, attn: Vec<f64>, gamma: f64, normalize_attn: bool) -> Result<TokenScores> {
    let rel = retrospective_excess_loss(his_lp, cur_lp)?;
    let rel_norm = normalize_rel(&rel);
    let attn = if normalize_attn { normalize_rel(&attn) } else { attn };
    let fused = fuse_scores(&rel_norm, &attn, gamma)?;
    Ok(TokenScores {
        rel,
        rel_norm,
        attn,
        fused,
        gamma,
    })
}

/// Uniform draws in [0, 1) for the random selector. Depends only on the
/// seed, the draw key and the sample id.
pub fn random_scores(seed: u64, key: u64, sample_id: usize, len: usize) -> Vec<f64> {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (sample_id as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 31)).wrapping_mul(0x94D0_49BB_1331_11EB);
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    (0..len).map(|_| rng.random::<f64>()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    /// The values the mask was ranked by.
    pub ranking: Vec<f64>,
    /// Component scores, present for ssToken.
    pub scores: Option<TokenScores>,
    pub mask: SelectionMask,
}

/// Scores one sample and selects its tokens.
///
/// `aux` is the history model for ssToken and the reference model for the
/// excess-loss baselines. `draw_key` varies the random selector's draws
/// (for example per epoch). The global baseline falls back to per-sample
/// top-ρ here; pool-wide selection lives in [`score_pool_global`].
pub fn score_sample(cur: &ModelSnapshot, aux: Option<&ModelSnapshot>, sample: &TokenizedSample, spec: &SelectorSpec, draw_key: u64) -> Result<ScoredSample> {
    spec.validate()?;
    let len = sample.resp_len();
    let need_aux = || {
        aux.ok_or_else(|| Error::Config(format!("selector {} needs a history/reference model", spec.kind)))
    };
    match spec.kind {
        SelectorKind::Full => Ok(ScoredSample {
            ranking: vec![1.0; len],
            scores: None,
            mask: SelectionMask::full(len),
        }),
        SelectorKind::Random => {
            let ranking = random_scores(spec.seed, draw_key, sample.id, len);
            let mask = select_topk(&ranking, spec.rho);
            Ok(ScoredSample {
                ranking,
                scores: None,
                mask,
            })
        }
        SelectorKind::Rho1 | SelectorKind::TokencleaningGlobal => {
            let reference = need_aux()?;
            let el = excess_loss(&forward_logprobs(cur, sample)?, &forward_logprobs(reference, sample)?)?;
            let mask = select_topk(&el, spec.rho);
            Ok(ScoredSample {
                ranking: el,
                scores: None,
                mask,
            })
        }
        SelectorKind::Sstoken => {
            let his = need_aux()?;
            let (cur_lp, attn) = attention_and_logprobs(cur, sample, spec.layer)?;
            let his_lp = forward_logprobs(his, sample)?;
            let scores = sstoken_scores(&cur_lp, &his_lp, attn, spec.gamma, spec.normalize_attn)?;
            let mask = select_topk(&scores.fused, spec.rho);
            Ok(ScoredSample {
                ranking: scores.fused.clone(),
                scores: Some(scores),
                mask,
            })
        }
    }
}

/// Fixed-model global selection: excess loss of `cur` against `reference`
/// over the whole pool, then pool-wide top-ρ.
pub fn score_pool_global(cur: &ModelSnapshot, reference: &ModelSnapshot, samples: &[TokenizedSample], rho: f64) -> Result<Vec<SelectionMask>> {
    let pool = samples
        .iter()
        .map(|s| excess_loss(&forward_logprobs(cur, s)?, &forward_logprobs(reference, s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_global_topk(&pool, rho))
}

/// One line of the mask export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub sample: usize,
    pub selector: SelectorKind,
    pub rho: f64,
    pub gamma: f64,
    pub k: usize,
    pub bits: String,
    /// Response token ids, so the record renders without the corpus.
    pub tokens: Vec<TokenId>,
    /// `[fused, rel_norm, attn]` per response token; the last two are null
    /// for selectors that do not compute them.
    pub triples: Vec<(f64, Option<f64>, Option<f64>)>,
}

impl MaskRecord {
    pub fn new(sample: &TokenizedSample, selector: SelectorKind, gamma: f64, scored: &ScoredSample) -> Self {
        let triples = match &scored.scores {
            Some(s) => s
                .fused
                .iter()
                .zip(&s.rel_norm)
                .zip(&s.attn)
                .map(|((&f, &r), &a)| (f, Some(r), Some(a)))
                .collect(),
            None => scored.ranking.iter().map(|&f| (f, None, None)).collect(),
        };
        MaskRecord {
            sample: sample.id,
            selector,
            rho: scored.mask.ratio,
            gamma,
            k: scored.mask.k,
            bits: scored.mask.bit_string(),
            tokens: sample.response_ids().to_vec(),
            triples,
        }
    }

    pub fn mask(&self) -> Result<SelectionMask> {
        let m = SelectionMask::parse_bits(&self.bits, self.rho)?;
        if m.k != self.k {
            return Err(Error::Format(format!("mask k {} disagrees with bits ({})", self.k, m.k)));
        }
        Ok(m)
    }

    pub fn rel_norm(&self) -> Option<Vec<f64>> {
        self.triples.iter().map(|t| t.1).collect()
    }

    pub fn attn(&self) -> Option<Vec<f64>> {
        self.triples.iter().map(|t| t.2).collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("mask record serializes")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))
    }
}
