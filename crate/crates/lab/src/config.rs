//! Run and sweep configuration, loaded from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sstoken_core::history::HistoryPolicy;
use sstoken_core::model::ModelConfig;
use sstoken_core::select::{SelectorKind, SelectorSpec, DEFAULT_GAMMA, DEFAULT_RHO};
use sstoken_core::train::{OptimizerConfig, TrainConfig};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub heldout: Option<PathBuf>,
    /// Ground-truth noise sidecar for the train split.
    pub train_noise: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: PathBuf::from("data/train.jsonl"),
            heldout: Some(PathBuf::from("data/heldout.jsonl")),
            train_noise: Some(PathBuf::from("data/train.noise.jsonl")),
        }
    }
}

impl DataConfig {
    fn resolve(&mut self, dir: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        join(&mut self.train);
        self.heldout.as_mut().map(join);
        self.train_noise.as_mut().map(join);
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Optional prefix for the run id.
    pub name: Option<String>,
    pub selector: SelectorKind,
    pub gamma: f64,
    pub rho: f64,
    /// Attention layer for ssToken scoring; the deepest layer when unset.
    pub layer: Option<usize>,
    pub normalize_attn: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<u64>,
    /// Leading train samples scored after training for metrics and the
    /// mask export; 0 means the whole split.
    pub probe_samples: usize,
    /// Starting parameters; a seeded fresh init when unset.
    pub base_checkpoint: Option<PathBuf>,
    pub reference_checkpoint: Option<PathBuf>,
    /// Initial history snapshot; the starting model when unset.
    pub history_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub history: HistoryPolicy,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: None,
            selector: SelectorKind::Sstoken,
            gamma: DEFAULT_GAMMA,
            rho: DEFAULT_RHO,
            layer: None,
            normalize_attn: false,
            seed: 0,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            probe_samples: 0,
            base_checkpoint: None,
            reference_checkpoint: None,
            history_checkpoint: None,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            history: HistoryPolicy::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Invalid(format!("run config: {e}")))
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        self.data.resolve(dir);
        let checkpoints = [&mut self.base_checkpoint, &mut self.reference_checkpoint, &mut self.history_checkpoint];
        for p in checkpoints.into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn selector_spec(&self) -> SelectorSpec {
        SelectorSpec {
            kind: self.selector,
            gamma: self.gamma,
            rho: self.rho,
            layer: self.layer,
            normalize_attn: self.normalize_attn,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            history: self.history.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.selector_spec().validate()?;
        self.history.validate()?;
        self.model.validate()?;
        if let Some(l) = self.layer {
            if l >= self.model.n_layers {
                return Err(LabError::Invalid(format!("layer {l} out of range for {} layers", self.model.n_layers)));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LabError::Invalid("epochs and batch_size must be at least 1".into()));
        }
        if self.selector.needs_reference() && self.reference_checkpoint.is_none() {
            return Err(LabError::Invalid(format!("selector {} needs reference_checkpoint", self.selector)));
        }
        Ok(())
    }

    pub fn resolved_layer(&self) -> usize {
        self.layer.unwrap_or(self.model.n_layers.saturating_sub(1))
    }

    /// Grid-point label without the seed; runs that differ only by seed
    /// share it.
    pub fn variant(&self) -> String {
        let mut s = format!(
            "{}_g{:.2}_r{:.2}_l{}",
            self.selector,
            self.gamma,
            self.rho,
            self.resolved_layer()
        );
        if let Some(n) = &self.name {
            s = format!("{n}_{s}");
        }
        s
    }

    pub fn run_id(&self) -> String {
        format!("{}_s{}", self.variant(), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub selectors: Vec<SelectorKind>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub rhos: Vec<f64>,
    /// Empty means the base config's layer.
    #[serde(default)]
    pub layers: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// A base run config crossed with a grid of selector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub base: RunConfig,
    pub grid: Grid,
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| LabError::Invalid(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut plan = Self::from_toml(&text)?;
        plan.base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.selectors.is_empty() || g.seeds.is_empty() {
            return Err(LabError::Invalid("grid needs at least one selector and one seed".into()));
        }
        let mut seeds = g.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != g.seeds.len() {
            return Err(LabError::Invalid("grid seeds must be distinct".into()));
        }
        Ok(())
    }

    /// Expands the grid in nesting order selector, γ, ρ, layer, seed.
    pub fn runs(&self) -> Vec<RunConfig> {
        let g = &self.grid;
        let or_base = |v: &[f64], base: f64| if v.is_empty() { vec![base] } else { v.to_vec() };
        let gammas = or_base(&g.gammas, self.base.gamma);
        let rhos = or_base(&g.rhos, self.base.rho);
        let layers: Vec<Option<usize>> = if g.layers.is_empty() {
            vec![self.base.layer]
        } else {
            g.layers.iter().map(|&l| Some(l)).collect()
        };
        let mut out = Vec::new();
        for &selector in &g.selectors {
            for &gamma in &gammas {
                for &rho in &rhos {
                    for &layer in &layers {
                        for &seed in &g.seeds {
                            out.push(RunConfig {
                                selector,
                                gamma,
                                rho,
                                layer,
                                seed,
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}
