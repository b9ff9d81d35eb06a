//! Per-run metrics rows and the selection-quality measures behind them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sstoken_core::select::{SelectionMask, SelectorKind};

use crate::error::{LabError, Result};

pub type NoiseMap = BTreeMap<usize, BTreeSet<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub variant: String,
    pub selector: SelectorKind,
    pub gamma: f64,
    pub rho: f64,
    pub layer: usize,
    pub seed: u64,
    pub steps: u64,
    pub heldout_nll: Option<f64>,
    /// Fraction of selected probe tokens that are injected noise.
    pub noise_selection_rate: Option<f64>,
    /// Same, for uniformly random masks at the run's ρ.
    pub random_noise_rate: Option<f64>,
    /// Share of the run's selected probe tokens also chosen by pure REL
    /// (γ=1) and by pure attention (γ=0).
    pub overlap_gamma1: Option<f64>,
    pub overlap_gamma0: Option<f64>,
    /// Kept out of the metrics files so they stay byte-reproducible; see
    /// the per-run timing file.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// |selected ∩ noise| / |selected|, pooled over samples; `None` when
/// nothing is selected.
pub fn noise_selection_rate<'a>(masks: impl IntoIterator<Item = (usize, &'a SelectionMask)>, noise: &NoiseMap) -> Option<f64> {
    let empty = BTreeSet::new();
    let (mut selected, mut noisy) = (0usize, 0usize);
    for (id, mask) in masks {
        let positions = noise.get(&id).unwrap_or(&empty);
        for p in mask.positions() {
            selected += 1;
            noisy += positions.contains(&p) as usize;
        }
    }
    (selected > 0).then(|| noisy as f64 / selected as f64)
}

/// |a ∩ b| / |a| pooled over paired masks.
pub fn mask_overlap(a: &[SelectionMask], b: &[SelectionMask]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(LabError::Invalid(format!("{} masks vs {}", a.len(), b.len())));
    }
    let (mut total, mut shared) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(LabError::Invalid("paired masks differ in length".into()));
        }
        total += x.k;
        shared += x.bits.iter().zip(&y.bits).filter(|(p, q)| **p && **q).count();
    }
    Ok((total > 0).then(|| shared as f64 / total as f64))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], comment: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    if let Some(c) = comment {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| LabError::Invalid(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| LabError::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| LabError::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| LabError::Invalid(e.to_string()))?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| LabError::io(path, e))
}

/// Reads rows from `.csv`, a single-row `.json` (a run's metrics file) or
/// line-delimited JSON, by extension.
pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let bad = |e: String| LabError::Invalid(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "csv") {
        csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes())
            .deserialize()
            .map(|r| r.map_err(|e| bad(e.to_string())))
            .collect()
    } else if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map(|r| vec![r]).map_err(|e| bad(e.to_string()))
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| bad(e.to_string())))
            .collect()
    }
}
