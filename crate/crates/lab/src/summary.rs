//! Aggregation of metrics rows across seeds.

use serde::{Deserialize, Serialize};
use sstoken_core::select::SelectorKind;

use crate::error::{LabError, Result};
use crate::metrics::MetricsRow;

pub const STDDEV_NOTE: &str = "stddev is the population standard deviation (divides by n)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub selector: SelectorKind,
    pub gamma: f64,
    pub rho: f64,
    pub layer: usize,
    pub runs: usize,
    pub heldout_nll_mean: Option<f64>,
    pub heldout_nll_std: Option<f64>,
    pub noise_rate_mean: Option<f64>,
    pub noise_rate_std: Option<f64>,
    pub random_noise_rate_mean: Option<f64>,
    pub random_noise_rate_std: Option<f64>,
}

/// Population mean and standard deviation; `None` for no values.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn stat(rows: &[&MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    match mean_std(&vals) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    }
}

/// One line per variant (selector settings without the seed), in order of
/// first appearance.
pub fn summarize(rows: &[MetricsRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(LabError::EmptyInput("no metrics rows to summarize".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    Ok(order
        .into_iter()
        .map(|v| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.variant == v).collect();
            let first = group[0];
            let (heldout_nll_mean, heldout_nll_std) = stat(&group, |r| r.heldout_nll);
            let (noise_rate_mean, noise_rate_std) = stat(&group, |r| r.noise_selection_rate);
            let (random_noise_rate_mean, random_noise_rate_std) = stat(&group, |r| r.random_noise_rate);
            SummaryRow {
                variant: v.to_string(),
                selector: first.selector,
                gamma: first.gamma,
                rho: first.rho,
                layer: first.layer,
                runs: group.len(),
                heldout_nll_mean,
                heldout_nll_std,
                noise_rate_mean,
                noise_rate_std,
                random_noise_rate_mean,
                random_noise_rate_std,
            }
        })
        .collect())
}
