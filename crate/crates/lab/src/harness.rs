//! Executes runs and plans, writing per-run artifacts and merged metrics.
//!
//! Layout under the output root:
//!
//! ```text
//! runs/<run_id>/config.toml     resolved run config
//! runs/<run_id>/train_log.jsonl ingest report, step and epoch events
//! runs/<run_id>/init.ckpt       starting parameters, for fresh-init runs
//! runs/<run_id>/model.ckpt      final parameters
//! runs/<run_id>/history.ckpt    final history snapshot
//! runs/<run_id>/masks.jsonl     probe-set mask export
//! runs/<run_id>/metrics.json    written last; marks the run complete
//! runs/<run_id>/timing.json     wall-clock seconds
//! metrics.csv, metrics.jsonl    rows in plan order
//! timing.csv, failures.jsonl
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sstoken_core::corpus::{load_corpus, Corpus, Split, TemplateSpec, TokenizedSample};
use sstoken_core::model::{load_checkpoint, save_checkpoint, ModelSnapshot, Role};
use sstoken_core::select::{score_pool_global, score_sample, MaskRecord, SelectionMask, SelectorKind, SelectorSpec};
use sstoken_core::train::{train, TrainEvent, TrainInputs};

use crate::config::{ExperimentPlan, RunConfig};
use crate::error::{LabError, Result};
use crate::metrics::{mask_overlap, noise_selection_rate, write_csv, write_jsonl, MetricsRow, NoiseMap};
use crate::synth::load_noise;

pub const METRICS_FILE: &str = "metrics.json";
pub const INIT_FILE: &str = "init.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.ckpt";
pub const MASKS_FILE: &str = "masks.jsonl";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.json";

pub fn run_dir(out_root: &Path, run_id: &str) -> PathBuf {
    out_root.join("runs").join(run_id)
}

pub struct RunData {
    pub train: Corpus,
    pub heldout: Option<Corpus>,
    pub noise: Option<NoiseMap>,
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let template = TemplateSpec::with_max_len(cfg.model.max_seq_len);
    let train = load_corpus(&cfg.data.train, &template, Split::Train, cfg.seed)?;
    let heldout = cfg
        .data
        .heldout
        .as_ref()
        .map(|p| load_corpus(p, &template, Split::Heldout, cfg.seed))
        .transpose()?;
    let noise = cfg.data.train_noise.as_ref().map(|p| load_noise(p)).transpose()?;
    Ok(RunData { train, heldout, noise })
}

/// Masks for `samples` under `spec`, scored with fixed models. `aux` is the
/// history model for ssToken and the reference for the excess-loss
/// selectors; the global selector ranks across `samples` as one pool.
pub fn score_masks(model: &ModelSnapshot, aux: Option<&ModelSnapshot>, samples: &[TokenizedSample], spec: &SelectorSpec) -> Result<Vec<SelectionMask>> {
    if spec.kind == SelectorKind::TokencleaningGlobal {
        let reference = aux.ok_or_else(|| LabError::Invalid("global selector needs a reference model".into()))?;
        return Ok(score_pool_global(model, reference, samples, spec.rho)?);
    }
    samples
        .iter()
        .map(|s| Ok(score_sample(model, aux, s, spec, 0)?.mask))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Timing {
    wall_clock_s: f64,
}

#[derive(Serialize)]
struct IngestEvent<'a> {
    event: &'static str,
    split: Split,
    samples: usize,
    rejected: &'a [sstoken_core::corpus::Rejection],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |e| LabError::io(path, e)
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<ModelSnapshot> {
    let (_, model) = load_checkpoint(path)?;
    let mut want = cfg.model.clone();
    want.attn_layer = model.config().attn_layer;
    if *model.config() != want {
        return Err(LabError::Invalid(format!("{}: model shape differs from the run config", path.display())));
    }
    Ok(model)
}

/// Trains one run into `dir` and returns its metrics row.
pub fn execute_run(cfg: &RunConfig, dir: &Path) -> Result<MetricsRow> {
    let start = Instant::now();
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(dir))?;
    let data = load_data(cfg)?;

    let log_path = dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let log_line = |v: String, log: &mut BufWriter<File>| writeln!(log, "{v}");
    for c in std::iter::once(&data.train).chain(data.heldout.as_ref()) {
        let ev = IngestEvent {
            event: "ingest",
            split: c.split,
            samples: c.samples.len(),
            rejected: &c.rejected,
        };
        log_line(serde_json::to_string(&ev).expect("ingest event serializes"), &mut log).map_err(io_err(&log_path))?;
        if !c.rejected.is_empty() {
            log::warn!("{:?} split: {} records rejected", c.split, c.rejected.len());
        }
    }

    let base = match &cfg.base_checkpoint {
        Some(p) => load_model(p, cfg)?,
        None => {
            let m = ModelSnapshot::init(cfg.model.clone(), cfg.seed)?;
            save_checkpoint(&dir.join(INIT_FILE), &m, Role::Model)?;
            m
        }
    };
    let reference = cfg.reference_checkpoint.as_ref().map(|p| load_model(p, cfg)).transpose()?;
    let history = cfg.history_checkpoint.as_ref().map(|p| load_model(p, cfg)).transpose()?;
    let spec = cfg.selector_spec();
    let mut log_err = None;
    let outcome = train(
        TrainInputs {
            train: &data.train.samples,
            heldout: data.heldout.as_ref().map(|c| c.samples.as_slice()),
            base: Some(base.clone()),
            reference: reference.clone(),
            history,
        },
        &spec,
        &cfg.train_config(),
        &mut |ev: &TrainEvent| {
            if let TrainEvent::Epoch(e) = ev {
                log::info!("epoch {} step {} heldout_nll {:?}", e.epoch, e.steps, e.heldout_nll);
            }
            let line = serde_json::to_string(ev).expect("train event serializes");
            if let Err(e) = log_line(line, &mut log) {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(LabError::io(&log_path, e));
    }
    log.flush().map_err(io_err(&log_path))?;
    save_checkpoint(&dir.join(MODEL_FILE), &outcome.model, Role::Model)?;
    save_checkpoint(&dir.join(HISTORY_FILE), &outcome.history, Role::History)?;

    let probe_len = match cfg.probe_samples {
        0 => data.train.samples.len(),
        n => n.min(data.train.samples.len()),
    };
    let probe = &data.train.samples[..probe_len];
    let masks = match spec.kind {
        // The run's global masks were fixed before training, from the base.
        SelectorKind::TokencleaningGlobal => {
            let all = score_masks(&base, reference.as_ref(), &data.train.samples, &spec)?;
            all[..probe_len].to_vec()
        }
        _ => {
            let aux = match spec.kind {
                SelectorKind::Sstoken => Some(&outcome.history),
                _ => reference.as_ref(),
            };
            score_masks(&outcome.model, aux, probe, &spec)?
        }
    };
    let mut export = String::new();
    for (s, m) in probe.iter().zip(&masks) {
        let scored = score_for_export(&outcome.model, &outcome.history, reference.as_ref(), s, &spec, m)?;
        export.push_str(&MaskRecord::new(s, spec.kind, spec.gamma, &scored).to_json_line());
        export.push('\n');
    }
    fs::write(dir.join(MASKS_FILE), export).map_err(io_err(dir))?;

    let random = SelectorSpec {
        kind: SelectorKind::Random,
        ..spec.clone()
    };
    let random_masks = score_masks(&outcome.model, None, probe, &random)?;
    let ss = |gamma| SelectorSpec {
        kind: SelectorKind::Sstoken,
        gamma,
        ..spec.clone()
    };
    let g1 = score_masks(&outcome.model, Some(&outcome.history), probe, &ss(1.0))?;
    let g0 = score_masks(&outcome.model, Some(&outcome.history), probe, &ss(0.0))?;
    let ids = || probe.iter().map(|s| s.id);
    let row = MetricsRow {
        run_id: cfg.run_id(),
        variant: cfg.variant(),
        selector: cfg.selector,
        gamma: cfg.gamma,
        rho: cfg.rho,
        layer: cfg.resolved_layer(),
        seed: cfg.seed,
        steps: outcome.report.steps.len() as u64,
        heldout_nll: outcome.report.final_heldout_nll(),
        noise_selection_rate: data.noise.as_ref().and_then(|n| noise_selection_rate(ids().zip(&masks), n)),
        random_noise_rate: data.noise.as_ref().and_then(|n| noise_selection_rate(ids().zip(&random_masks), n)),
        overlap_gamma1: mask_overlap(&masks, &g1)?,
        overlap_gamma0: mask_overlap(&masks, &g0)?,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let timing = Timing {
        wall_clock_s: row.wall_clock_s,
    };
    fs::write(dir.join(TIMING_FILE), serde_json::to_string(&timing).expect("timing serializes")).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(&row).expect("metrics serialize") + "\n";
    write_atomic(&dir.join(METRICS_FILE), json.as_bytes())?;
    Ok(row)
}

/// Score record for the mask export: ssToken runs carry their fused,
/// REL and attention components; other selectors keep their ranking.
fn score_for_export(model: &ModelSnapshot, history: &ModelSnapshot, reference: Option<&ModelSnapshot>, sample: &TokenizedSample, spec: &SelectorSpec, mask: &SelectionMask) -> Result<sstoken_core::select::ScoredSample> {
    let mut scored = match spec.kind {
        SelectorKind::Sstoken => score_sample(model, Some(history), sample, spec, 0)?,
        SelectorKind::Rho1 | SelectorKind::TokencleaningGlobal => score_sample(model, reference, sample, spec, 0)?,
        _ => score_sample(model, None, sample, spec, 0)?,
    };
    scored.mask = mask.clone();
    Ok(scored)
}

/// Reads a completed run's metrics, if present.
pub fn completed_row(dir: &Path) -> Result<Option<MetricsRow>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut row: MetricsRow = serde_json::from_str(&text).map_err(|e| LabError::Invalid(format!("{}: {e}", path.display())))?;
    if let Ok(t) = fs::read_to_string(dir.join(TIMING_FILE)) {
        if let Ok(t) = serde_json::from_str::<Timing>(&t) {
            row.wall_clock_s = t.wall_clock_s;
        }
    }
    Ok(Some(row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Successful rows in plan order.
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<RunFailure>,
    /// Runs skipped because their metrics already existed.
    pub resumed: usize,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    run_id: &'a str,
    wall_clock_s: f64,
}

/// Runs every grid point not already completed under `out_root`, then
/// rewrites the merged metrics files. A failing run is recorded and the
/// plan moves on.
pub fn run_plan(plan: &ExperimentPlan, out_root: &Path) -> Result<PlanOutcome> {
    plan.validate()?;
    fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let mut outcome = PlanOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
        resumed: 0,
    };
    let runs = plan.runs();
    for (i, cfg) in runs.iter().enumerate() {
        let id = cfg.run_id();
        let dir = run_dir(out_root, &id);
        match completed_row(&dir) {
            Ok(Some(row)) => {
                log::info!("[{}/{}] {id}: already complete", i + 1, runs.len());
                outcome.resumed += 1;
                outcome.rows.push(row);
                continue;
            }
            Ok(None) => {}
            Err(e) => log::warn!("{id}: unreadable metrics, rerunning: {e}"),
        }
        log::info!("[{}/{}] {id}", i + 1, runs.len());
        match execute_run(cfg, &dir) {
            Ok(row) => outcome.rows.push(row),
            Err(e) => {
                log::error!("{id} failed: {e}");
                outcome.failures.push(RunFailure {
                    run_id: id,
                    error: e.to_string(),
                });
            }
        }
    }
    write_csv(&out_root.join("metrics.csv"), &outcome.rows, None)?;
    write_jsonl(&out_root.join("metrics.jsonl"), &outcome.rows)?;
    let timing: Vec<TimingRow> = outcome
        .rows
        .iter()
        .map(|r| TimingRow {
            run_id: &r.run_id,
            wall_clock_s: r.wall_clock_s,
        })
        .collect();
    write_csv(&out_root.join("timing.csv"), &timing, None)?;
    let failures_path = out_root.join("failures.jsonl");
    if outcome.failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(io_err(&failures_path))?;
        }
    } else {
        write_jsonl(&failures_path, &outcome.failures)?;
    }
    Ok(outcome)
}
