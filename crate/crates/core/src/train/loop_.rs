use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, optimizer_step, MaskedBatch, OptimizerConfig, OptimizerState};
use crate::corpus::TokenizedSample;
use crate::error::{Error, Result};
use crate::history::{init_history, maybe_update, HistoryCache, HistoryMode, HistoryPolicy};
use crate::model::{forward_logprobs, ModelConfig, ModelSnapshot};
use crate::select::{
    attention_and_logprobs, excess_loss, random_scores, score_pool_global, select_topk, sstoken_scores, SelectionMask,
    SelectorKind, SelectorSpec,
};

const SHUFFLE_SALT: u64 = 0x5EED_5A17_0000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub history: HistoryPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps, for equal budgets across selectors.
    pub max_steps: Option<u64>,
    /// Seeds the initial parameters (when no base model is given) and the
    /// data order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            history: HistoryPolicy::default(),
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            seed: 0,
        }
    }
}

pub struct TrainInputs<'a> {
    pub train: &'a [TokenizedSample],
    pub heldout: Option<&'a [TokenizedSample]>,
    /// Starting model; a seeded fresh init when absent.
    pub base: Option<ModelSnapshot>,
    /// Reference model for the excess-loss baselines.
    pub reference: Option<ModelSnapshot>,
    /// Initial history snapshot; a copy of the starting model when absent.
    pub history: Option<ModelSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub samples: usize,
    pub selected_tokens: usize,
    pub response_tokens: usize,
    /// Hash of the batch's sample ids and mask bits.
    pub mask_digest: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub heldout_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Epoch 0 is the starting model.
    pub epochs: Vec<EpochRecord>,
    /// Batches dropped because every mask in them was empty.
    pub skipped_batches: usize,
    pub history_cache_hits: usize,
}

impl TrainReport {
    pub fn final_heldout_nll(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.heldout_nll)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelSnapshot,
    pub history: ModelSnapshot,
    pub report: TrainReport,
}

/// Token-pooled mean response NLL.
pub fn heldout_nll(model: &ModelSnapshot, samples: &[TokenizedSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let lp = forward_logprobs(model, s)?;
        total += lp.nll().sum::<f64>();
        count += lp.len();
    }
    if count == 0 {
        return Err(Error::Config("held-out set has no response tokens".into()));
    }
    Ok(total / count as f64)
}

fn mask_digest(samples: &[&TokenizedSample], masks: &[SelectionMask]) -> u64 {
    let mut h = DefaultHasher::new();
    for (s, m) in samples.iter().zip(masks) {
        s.id.hash(&mut h);
        m.bits.hash(&mut h);
    }
    h.finish()
}

struct Selector<'a> {
    spec: &'a SelectorSpec,
    reference: Option<&'a ModelSnapshot>,
    global_masks: Option<Vec<SelectionMask>>,
    cache: HistoryCache,
    cache_enabled: bool,
}

impl Selector<'_> {
    fn mask(&mut self, model: &ModelSnapshot, history: &ModelSnapshot, index: usize, sample: &TokenizedSample, epoch: usize) -> Result<SelectionMask> {
        let rho = self.spec.rho;
        match self.spec.kind {
            SelectorKind::Full => Ok(SelectionMask::full(sample.resp_len())),
            SelectorKind::Random => {
                let draws = random_scores(self.spec.seed, epoch as u64, sample.id, sample.resp_len());
                Ok(select_topk(&draws, rho))
            }
            SelectorKind::Rho1 => {
                let reference = self.reference.expect("checked before training");
                let el = excess_loss(&forward_logprobs(model, sample)?, &forward_logprobs(reference, sample)?)?;
                Ok(select_topk(&el, rho))
            }
            SelectorKind::TokencleaningGlobal => Ok(self.global_masks.as_ref().expect("precomputed")[index].clone()),
            SelectorKind::Sstoken => {
                let (cur_lp, attn) = attention_and_logprobs(model, sample, self.spec.layer)?;
                let his_lp = if self.cache_enabled {
                    self.cache.get_or_compute(history, sample)?
                } else {
                    forward_logprobs(history, sample)?
                };
                let scores = sstoken_scores(&cur_lp, &his_lp, attn, self.spec.gamma, self.spec.normalize_attn)?;
                Ok(select_topk(&scores.fused, rho))
            }
        }
    }
}

/// Runs the selection-masked fine-tuning loop.
///
/// Each step scores the batch with the current model (no gradients), builds
/// masks, backpropagates the masked loss and applies one optimizer step,
/// then lets the history policy update the history snapshot.
pub fn train(inputs: TrainInputs, selector: &SelectorSpec, config: &TrainConfig, observer: &mut dyn FnMut(&TrainEvent)) -> Result<TrainOutcome> {
    selector.validate()?;
    config.history.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if selector.kind.needs_reference() && inputs.reference.is_none() {
        return Err(Error::Config(format!("selector {} needs a reference model", selector.kind)));
    }
    let base = match inputs.base {
        Some(b) => b,
        None => ModelSnapshot::init(config.model.clone(), config.seed)?,
    };
    if let Some(r) = &inputs.reference {
        if r.config().vocab_size != base.config().vocab_size {
            return Err(Error::Config("reference and base vocabularies differ".into()));
        }
    }

    let mut model = base.clone();
    let mut history = match inputs.history {
        Some(h) => {
            if h.config().vocab_size != base.config().vocab_size || h.config().max_seq_len < base.config().max_seq_len {
                return Err(Error::Config("history model is incompatible with the base".into()));
            }
            init_history(&h)
        }
        None => init_history(&base),
    };
    let mut opt = OptimizerState::new(&model, config.optimizer.clone());
    let global_masks = match (selector.kind, &inputs.reference) {
        (SelectorKind::TokencleaningGlobal, Some(r)) => Some(score_pool_global(&base, r, inputs.train, selector.rho)?),
        _ => None,
    };
    let mut sel = Selector {
        spec: selector,
        reference: inputs.reference.as_ref(),
        global_masks,
        cache: HistoryCache::new(),
        cache_enabled: config.history.mode == HistoryMode::FrozenBase,
    };

    let mut report = TrainReport::default();
    let eval = |m: &ModelSnapshot| inputs.heldout.map(|h| heldout_nll(m, h)).transpose();
    let first = EpochRecord {
        epoch: 0,
        steps: 0,
        heldout_nll: eval(&model)?,
    };
    observer(&TrainEvent::Epoch(first.clone()));
    report.epochs.push(first);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..inputs.train.len()).collect();
    let mut step = 0u64;
    let budget_left = |step: u64| config.max_steps.is_none_or(|m| step < m);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if !budget_left(step) {
                break;
            }
            let start = Instant::now();
            let mut samples = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            let mut response_tokens = 0;
            for &idx in chunk {
                let s = &inputs.train[idx];
                let m = sel.mask(&model, &history, idx, s, epoch)?;
                response_tokens += s.resp_len();
                if m.k > 0 {
                    samples.push(s);
                    masks.push(m);
                }
            }
            if samples.is_empty() {
                report.skipped_batches += 1;
                continue;
            }
            let digest = mask_digest(&samples, &masks);
            let selected_tokens = masks.iter().map(|m| m.k).sum();
            let batch = MaskedBatch::new(samples, masks)?;
            let (loss, grads) = backward(&model, &batch)?;
            let (next, next_opt) = optimizer_step(&model, &grads, &opt)?;
            model = next;
            opt = next_opt;
            step += 1;
            if config.history.is_due(step) {
                history = maybe_update(&config.history, step, &history, &model)?;
                sel.cache.invalidate();
            }
            let rec = StepRecord {
                step,
                epoch,
                loss,
                samples: batch.len(),
                selected_tokens,
                response_tokens,
                mask_digest: digest,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            observer(&TrainEvent::Step(rec.clone()));
            report.steps.push(rec);
        }
        let rec = EpochRecord {
            epoch,
            steps: step,
            heldout_nll: eval(&model)?,
        };
        observer(&TrainEvent::Epoch(rec.clone()));
        report.epochs.push(rec);
        if !budget_left(step) {
            break;
        }
    }
    report.history_cache_hits = sel.cache.hits();
    Ok(TrainOutcome {
        model,
        history,
        report,
    })
}
