use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand, ValueEnum};
use sstoken_core::select::{MaskRecord, SelectorKind};
use sstoken_lab::config::{ExperimentPlan, RunConfig};
use sstoken_lab::harness::{execute_run, run_dir, run_plan};
use sstoken_lab::metrics::{read_rows, write_csv};
use sstoken_lab::render::{html_document, render_record};
use sstoken_lab::summary::{summarize, STDDEV_NOTE};
use sstoken_lab::synth::{gen_synthetic_corpus, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "sstoken-lab", version, about = "Token-selection fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic noisy corpus with ground-truth noise sidecars.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_heldout: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        heldout_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a single run.
    Run {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output root; the run lands in <out>/runs/<run_id>.
        #[arg(long, env = "SSTOKEN_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Run every grid point of a plan, skipping completed runs.
    Sweep {
        /// Plan file (TOML) with [base] and [grid] tables.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, env = "SSTOKEN_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Aggregate metrics rows across seeds.
    Summarize {
        /// metrics.csv or metrics.jsonl files.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Write CSV here instead of printing a table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Visualize an ssToken mask export.
    Render {
        #[arg(long)]
        masks: PathBuf,
        /// Only these sample ids; all by default.
        #[arg(long, value_delimiter = ',')]
        sample: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Format::Html)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Html,
    Text,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    #[arg(long)]
    selector: Option<SelectorKind>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    reference_checkpoint: Option<PathBuf>,
    #[arg(long)]
    history_checkpoint: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) {
        if let Some(v) = self.selector {
            cfg.selector = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if self.layer.is_some() {
            cfg.layer = self.layer;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if self.base_checkpoint.is_some() {
            cfg.base_checkpoint = self.base_checkpoint;
        }
        if self.reference_checkpoint.is_some() {
            cfg.reference_checkpoint = self.reference_checkpoint;
        }
        if self.history_checkpoint.is_some() {
            cfg.history_checkpoint = self.history_checkpoint;
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn write_or_print(out: Option<&Path>, contents: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, contents).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Command::GenCorpus {
            out,
            n_train,
            n_heldout,
            noise,
            heldout_noise,
            seed,
        } => {
            let cfg = SynthConfig {
                n_train,
                n_heldout,
                noise,
                heldout_noise,
                seed,
                ..SynthConfig::default()
            };
            let files = gen_synthetic_corpus(&cfg, &out)?;
            println!("train={}", files.train.display());
            println!("heldout={}", files.heldout.display());
            println!("train_noise={}", files.train_noise.display());
        }
        Command::Run { config, overrides, out } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            overrides.apply(&mut cfg);
            let dir = run_dir(&out, &cfg.run_id());
            let row = execute_run(&cfg, &dir).with_context(|| format!("run {}", cfg.run_id()))?;
            println!("run_dir={}", dir.display());
            println!(
                "heldout_nll={} noise_rate={} random_noise_rate={} steps={} wall_clock_s={:.1}",
                fmt_opt(row.heldout_nll),
                fmt_opt(row.noise_selection_rate),
                fmt_opt(row.random_noise_rate),
                row.steps,
                row.wall_clock_s
            );
        }
        Command::Sweep { plan, out } => {
            let plan = ExperimentPlan::load(&plan).with_context(|| format!("loading {}", plan.display()))?;
            let res = run_plan(&plan, &out)?;
            println!(
                "completed={} resumed={} failed={}",
                res.rows.len(),
                res.resumed,
                res.failures.len()
            );
            println!("metrics={}", out.join("metrics.csv").display());
            for f in &res.failures {
                eprintln!("failed {}: {}", f.run_id, f.error);
            }
            if !res.failures.is_empty() {
                bail!("{} run(s) failed", res.failures.len());
            }
        }
        Command::Summarize { metrics, out } => {
            let mut rows = Vec::new();
            for p in &metrics {
                rows.extend(read_rows(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let summary = summarize(&rows)?;
            match out {
                Some(p) => write_csv(&p, &summary, Some(STDDEV_NOTE))?,
                None => {
                    println!("# {STDDEV_NOTE}");
                    println!("{:<32} {:>4} {:>18} {:>18} {:>18}", "variant", "runs", "heldout_nll", "noise_rate", "random_noise_rate");
                    for s in &summary {
                        let pm = |m: Option<f64>, sd: Option<f64>| format!("{} ± {}", fmt_opt(m), fmt_opt(sd));
                        println!(
                            "{:<32} {:>4} {:>18} {:>18} {:>18}",
                            s.variant,
                            s.runs,
                            pm(s.heldout_nll_mean, s.heldout_nll_std),
                            pm(s.noise_rate_mean, s.noise_rate_std),
                            pm(s.random_noise_rate_mean, s.random_noise_rate_std)
                        );
                    }
                }
            }
        }
        Command::Render {
            masks,
            sample,
            format,
            out,
        } => {
            let text = fs::read_to_string(&masks).with_context(|| format!("reading {}", masks.display()))?;
            let mut parts = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let rec = MaskRecord::parse_line(line).with_context(|| format!("{}:{}", masks.display(), i + 1))?;
                if sample.is_empty() || sample.contains(&rec.sample) {
                    parts.push(render_record(&rec)?);
                }
            }
            if parts.is_empty() {
                bail!("no matching records in {}", masks.display());
            }
            let doc = match format {
                Format::Html => html_document(&format!("Token selection: {}", masks.display()), &parts),
                Format::Text => parts.iter().map(|p| p.text.clone() + "\n").collect(),
            };
            write_or_print(out.as_deref(), &doc)?;
        }
    }
    Ok(())
}
