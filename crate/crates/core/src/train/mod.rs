//! Selection-masked loss, reverse-mode gradients, the optimizer and the
//! training loop.

mod backward;
mod loop_;
mod optim;

pub use backward::{backward, backward_scaled, response_logit_grads};
pub use loop_::{heldout_nll, train, EpochRecord, StepRecord, TrainConfig, TrainEvent, TrainInputs, TrainOutcome, TrainReport};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};

use crate::corpus::TokenizedSample;
use crate::error::{Error, Result};
use crate::model::{forward_logprobs, ModelSnapshot};
use crate::select::SelectionMask;

/// Samples paired with their response-token masks.
#[derive(Debug, Clone)]
pub struct MaskedBatch<'a> {
    pub samples: Vec<&'a TokenizedSample>,
    pub masks: Vec<SelectionMask>,
}

impl<'a> MaskedBatch<'a> {
    pub fn new(samples: Vec<&'a TokenizedSample>, masks: Vec<SelectionMask>) -> Result<Self> {
        if samples.len() != masks.len() {
            return Err(Error::LengthMismatch {
                left: samples.len(),
                right: masks.len(),
            });
        }
        for (s, m) in samples.iter().zip(&masks) {
            if m.len() != s.resp_len() {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: s.resp_len(),
                });
            }
        }
        Ok(MaskedBatch { samples, masks })
    }

    /// Every response token selected.
    pub fn full(samples: Vec<&'a TokenizedSample>) -> Self {
        let masks = samples.iter().map(|s| SelectionMask::full(s.resp_len())).collect();
        MaskedBatch { samples, masks }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub(crate) fn check_nonempty_masks(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyMask { sample: 0 });
        }
        for (s, m) in self.samples.iter().zip(&self.masks) {
            if m.positions().next().is_none() {
                return Err(Error::EmptyMask { sample: s.id });
            }
        }
        Ok(())
    }
}

/// Mean over samples of the mean NLL of each sample's selected tokens.
///
/// Each sample is normalized by its actual selected count, so an all-ones
/// mask gives the plain response NLL.
pub fn masked_loss(model: &ModelSnapshot, batch: &MaskedBatch) -> Result<f64> {
    batch.check_nonempty_masks()?;
    let mut total = 0.0;
    for (s, m) in batch.samples.iter().zip(&batch.masks) {
        let lp = forward_logprobs(model, s)?;
        let (sum, k) = m
            .positions()
            .fold((0.0, 0usize), |(acc, k), i| (acc - lp.values()[i], k + 1));
        total += sum / k as f64;
    }
    Ok(total / batch.len() as f64)
}
