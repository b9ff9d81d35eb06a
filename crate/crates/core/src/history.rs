//! History snapshot maintenance: frozen base copy or exponential moving
//! average of the trained parameters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedSample;
use crate::error::{Error, Result};
use crate::model::{forward_logprobs, ModelSnapshot, TokenLogProbs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    FrozenBase,
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistoryPolicy {
    pub mode: HistoryMode,
    pub alpha: f64,
    pub update_every: u64,
}

impl Default for HistoryPolicy {
    fn default() -> Self {
        HistoryPolicy {
            mode: HistoryMode::FrozenBase,
            alpha: 0.99,
            update_every: 50,
        }
    }
}

impl HistoryPolicy {
    pub fn ema(alpha: f64, update_every: u64) -> Self {
        HistoryPolicy {
            mode: HistoryMode::Ema,
            alpha,
            update_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.update_every == 0 {
            return Err(Error::Domain("update_every must be at least 1".into()));
        }
        Ok(())
    }

    /// True when an EMA update is scheduled after optimizer step `t`.
    pub fn is_due(&self, t: u64) -> bool {
        self.mode == HistoryMode::Ema && t.is_multiple_of(self.update_every)
    }
}

/// Deep copy of the base model. The copy never shares storage with `base`.
pub fn init_history(base: &ModelSnapshot) -> ModelSnapshot {
    base.with_params(base.params().clone(), base.version())
        .expect("a valid snapshot stays valid when copied")
}

/// `α·his + (1−α)·cur`, parameter by parameter.
///
/// Evaluated as `his + (1−α)·(cur − his)` so that `α = 1` and `cur = his`
/// return `his` bitwise; `α = 0` returns `cur` bitwise.
pub fn ema_update(his: &ModelSnapshot, cur: &ModelSnapshot, alpha: f64) -> Result<ModelSnapshot> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    if his.config() != cur.config() {
        return Err(Error::Shape("history and current configs differ".into()));
    }
    if alpha == 0.0 {
        return his.with_params(cur.params().clone(), cur.version());
    }
    let mut params = his.params().clone();
    let beta = 1.0 - alpha;
    params.zip_mut(cur.params(), |_, h, c| {
        for (x, y) in h.iter_mut().zip(c) {
            *x += beta * (y - *x);
        }
    });
    his.with_params(params, cur.version())
}

/// Applies the policy after optimizer step `t`.
pub fn maybe_update(policy: &HistoryPolicy, t: u64, his: &ModelSnapshot, cur: &ModelSnapshot) -> Result<ModelSnapshot> {
    if policy.is_due(t) {
        ema_update(his, cur, policy.alpha)
    } else {
        Ok(his.clone())
    }
}

/// History log-probabilities keyed by sample id. Only valid while the
/// history snapshot is frozen; [`HistoryCache::invalidate`] on any update.
#[derive(Debug, Default)]
pub struct HistoryCache {
    entries: HashMap<usize, TokenLogProbs>,
    hits: usize,
}

impl HistoryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(&mut self, his: &ModelSnapshot, sample: &TokenizedSample) -> Result<TokenLogProbs> {
        if let Some(lp) = self.entries.get(&sample.id) {
            self.hits += 1;
            return Ok(lp.clone());
        }
        let lp = forward_logprobs(his, sample)?;
        self.entries.insert(sample.id, lp.clone());
        Ok(lp)
    }

    pub fn invalidate(&mut self) {
        self.entries.clear();
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Params};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 8,
            ..ModelConfig::default()
        }
    }

    fn constant(value: f64) -> ModelSnapshot {
        let mut p = Params::zeros(&cfg());
        p.for_each_mut(|_, s| s.fill(value));
        ModelSnapshot::new(cfg(), p, 0).unwrap()
    }

    #[test]
    fn init_is_a_bitwise_copy() {
        let base = ModelSnapshot::init(cfg(), 4).unwrap();
        let his = init_history(&base);
        assert!(his.same_params(&base));
        assert!(!std::ptr::eq(his.params(), base.params()));
    }

    #[test]
    fn ema_scalar_arithmetic() {
        let out = ema_update(&constant(1.0), &constant(0.0), 0.9).unwrap();
        assert!(out.params().tensors().iter().all(|(_, _, d)| d.iter().all(|&v| v == 0.9)));
    }

    #[test]
    fn ema_endpoints() {
        let h = ModelSnapshot::init(cfg(), 1).unwrap();
        let c = ModelSnapshot::init(cfg(), 2).unwrap();
        assert!(ema_update(&h, &c, 1.0).unwrap().same_params(&h));
        assert!(ema_update(&h, &c, 0.0).unwrap().same_params(&c));
        assert!(ema_update(&h, &h, 0.37).unwrap().same_params(&h));
        assert!(ema_update(&h, &c, 1.2).is_err());
    }

    #[test]
    fn schedule() {
        let h = constant(1.0);
        let c = constant(0.0);
        let frozen = HistoryPolicy::default();
        assert!(maybe_update(&frozen, 50, &h, &c).unwrap().same_params(&h));
        let ema = HistoryPolicy::ema(0.5, 10);
        let updated = maybe_update(&ema, 10, &h, &c).unwrap();
        assert!(updated.params().tensors().iter().all(|(_, _, d)| d.iter().all(|&v| v == 0.5)));
        assert!(maybe_update(&ema, 7, &h, &c).unwrap().same_params(&h));
        assert!(HistoryPolicy::ema(0.5, 0).validate().is_err());
    }
}
