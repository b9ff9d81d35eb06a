//! Synthetic prompt→response tasks with injected token noise.
//!
//! Each record is a copy, reverse or small addition task. Every response
//! character is independently replaced, with probability `p`, by a different
//! random printable ASCII character; the replaced positions are recorded in
//! a sidecar so selection quality can be scored against ground truth.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sstoken_core::corpus::RawRecord;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_heldout: usize,
    /// Train-split noise rate.
    pub noise: f64,
    /// Held-out noise rate; clean by default so evaluation measures the task.
    pub heldout_noise: f64,
    /// Letter-string length range for the copy and reverse tasks.
    pub min_len: usize,
    pub max_len: usize,
    /// Addition operands are drawn from `0..=max_operand`.
    pub max_operand: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 2000,
            n_heldout: 200,
            noise: 0.3,
            heldout_noise: 0.0,
            min_len: 5,
            max_len: 5,
            max_operand: 9,
            seed: 0,
        }
    }
}

/// Ground-truth noise for one record: response token indices that were
/// replaced, out of `candidates` noisable positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub line: usize,
    pub candidates: usize,
    pub noise: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub records: Vec<RawRecord>,
    pub noise: Vec<NoiseEntry>,
}

impl SynthSplit {
    pub fn noise_fraction(&self) -> f64 {
        let noisy: usize = self.noise.iter().map(|n| n.noise.len()).sum();
        let total: usize = self.noise.iter().map(|n| n.candidates).sum();
        noisy as f64 / total.max(1) as f64
    }
}

fn letters(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn clean_record(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> RawRecord {
    match rng.random_range(0..3) {
        0 => {
            let s = letters(rng, cfg.min_len, cfg.max_len);
            RawRecord {
                prompt: format!("C:{s}"),
                response: s,
            }
        }
        1 => {
            let s = letters(rng, cfg.min_len, cfg.max_len);
            RawRecord {
                prompt: format!("R:{s}"),
                response: s.chars().rev().collect(),
            }
        }
        _ => {
            let a = rng.random_range(0..=cfg.max_operand);
            let b = rng.random_range(0..=cfg.max_operand);
            RawRecord {
                prompt: format!("{a}+{b}"),
                response: (a + b).to_string(),
            }
        }
    }
}

fn inject_noise(response: &str, p: f64, rng: &mut ChaCha8Rng) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(response.len());
    let mut positions = Vec::new();
    for (i, c) in response.bytes().enumerate() {
        if rng.random::<f64>() < p {
            // 94 printable characters; skip the original.
            let mut r = rng.random_range(0x21u8..0x7E);
            if r >= c {
                r += 1;
            }
            out.push(r as char);
            positions.push(i);
        } else {
            out.push(c as char);
        }
    }
    (out, positions)
}

fn generate_split(cfg: &SynthConfig, n: usize, p: f64, rng: &mut ChaCha8Rng) -> SynthSplit {
    let mut records = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for line in 0..n {
        let clean = clean_record(cfg, rng);
        let (response, positions) = inject_noise(&clean.response, p, rng);
        noise.push(NoiseEntry {
            line,
            candidates: response.len(),
            noise: positions,
        });
        records.push(RawRecord {
            prompt: clean.prompt,
            response,
        });
    }
    SynthSplit { records, noise }
}

/// Deterministic (train, heldout) splits.
pub fn generate(cfg: &SynthConfig) -> Result<(SynthSplit, SynthSplit)> {
    for p in [cfg.noise, cfg.heldout_noise] {
        if !(0.0..1.0).contains(&p) {
            return Err(LabError::Invalid(format!("noise rate {p} outside [0, 1)")));
        }
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(LabError::Invalid(format!("bad string length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_split(cfg, cfg.n_train, cfg.noise, &mut rng);
    let heldout = generate_split(cfg, cfg.n_heldout, cfg.heldout_noise, &mut rng);
    Ok((train, heldout))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub train_noise: PathBuf,
    pub heldout_noise: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusFiles {
            train: dir.join("train.jsonl"),
            heldout: dir.join("heldout.jsonl"),
            train_noise: dir.join("train.noise.jsonl"),
            heldout_noise: dir.join("heldout.noise.jsonl"),
        }
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("serializable"));
        s.push('\n');
    }
    s
}

fn write(path: &Path, contents: String) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

/// Writes the corpus and its noise sidecars into `dir`.
pub fn gen_synthetic_corpus(cfg: &SynthConfig, dir: &Path) -> Result<CorpusFiles> {
    let (train, heldout) = generate(cfg)?;
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let files = CorpusFiles::in_dir(dir);
    write(&files.train, jsonl(&train.records))?;
    write(&files.heldout, jsonl(&heldout.records))?;
    write(&files.train_noise, jsonl(&train.noise))?;
    write(&files.heldout_noise, jsonl(&heldout.noise))?;
    Ok(files)
}

/// Noise positions keyed by line number.
pub fn load_noise(path: &Path) -> Result<std::collections::BTreeMap<usize, BTreeSet<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let e: NoiseEntry = serde_json::from_str(l).map_err(|e| LabError::Invalid(format!("{}: {e}", path.display())))?;
            Ok((e.line, e.noise.into_iter().collect()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_has_no_positions() {
        let cfg = SynthConfig {
            n_train: 300,
            n_heldout: 10,
            noise: 0.0,
            ..SynthConfig::default()
        };
        let (train, heldout) = generate(&cfg).unwrap();
        assert!(train.noise.iter().all(|n| n.noise.is_empty()));
        assert!(heldout.noise.iter().all(|n| n.noise.is_empty()));
    }

    #[test]
    fn noise_fraction_concentrates() {
        // Binomial(n ≥ 10 000, 0.3): sd ≤ 0.0046, so ±0.02 is > 4 sd.
        let cfg = SynthConfig {
            n_train: 3000,
            n_heldout: 0,
            noise: 0.3,
            seed: 17,
            ..SynthConfig::default()
        };
        let (train, _) = generate(&cfg).unwrap();
        let candidates: usize = train.noise.iter().map(|n| n.candidates).sum();
        assert!(candidates >= 10_000, "{candidates}");
        assert!((train.noise_fraction() - 0.3).abs() <= 0.02, "{}", train.noise_fraction());
    }

    #[test]
    fn noise_changes_the_character() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = "abcdefghijklmnopqrstuvwxyz0123456789";
        for _ in 0..200 {
            let (noisy, pos) = inject_noise(clean, 0.5, &mut rng);
            assert_eq!(noisy.len(), clean.len());
            for (i, (a, b)) in clean.bytes().zip(noisy.bytes()).enumerate() {
                assert_eq!(a != b, pos.contains(&i));
                assert!((0x21..=0x7E).contains(&b));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 50,
            n_heldout: 5,
            ..SynthConfig::default()
        };
        let a = gen_synthetic_corpus(&cfg, dir_a.path()).unwrap();
        let b = gen_synthetic_corpus(&cfg, dir_b.path()).unwrap();
        for (x, y) in [(a.train, b.train), (a.train_noise, b.train_noise), (a.heldout, b.heldout)] {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        assert!(generate(&SynthConfig { noise: 1.0, ..cfg }).is_err());
    }
}
