//! Few-shot benchmark on synthetic subjects.
//!
//! Each seed draws a fresh corpus and a fresh set of initialisations, then
//! runs leave-one-subject-out for every strategy. Per-seed summaries are
//! averaged over folds; cross-seed summaries are medians.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::synth::{generate, SynthError, SynthSpec};
use crate::train::{self, FoldResult, Strategy, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid benchmark config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Held-out subjects per seed; 0 holds out every subject.
    pub folds_per_seed: usize,
    /// When non-zero, epochs to target come from a second, longer fine-tune
    /// of this many epochs from the same initialisation. A horizon of a few
    /// epochs cannot show how slowly a random initialisation converges.
    pub convergence_epochs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            strategies: vec![Strategy::Conventional, Strategy::Transfer, Strategy::Maml],
            seeds: (0..10).collect(),
            folds_per_seed: 0,
            convergence_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub strategy: Strategy,
    pub accuracy: f64,
    /// Mean over folds that accepted at least one window.
    pub accepted_accuracy: Option<f64>,
    /// Unfiltered accuracy over the same folds as `accepted_accuracy`.
    pub accuracy_where_accepted: Option<f64>,
    pub acceptance_rate: f64,
    pub median_epochs_to_target: Option<f64>,
    pub folds: Vec<FoldResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub median_accuracy: f64,
    pub median_accepted_accuracy: Option<f64>,
    pub median_accuracy_where_accepted: Option<f64>,
    pub median_acceptance_rate: f64,
    pub median_epochs_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seeds: Vec<SeedSummary>,
    pub summary: Vec<StrategySummary>,
}

impl BenchReport {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategySummary> {
        self.summary.iter().find(|x| x.strategy == s)
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Held-out subject indices for one seed: an evenly spaced, seed-rotated
/// subset when `folds < n`.
pub fn held_out(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    if folds == 0 || folds >= n {
        return (0..n).collect();
    }
    let offset = (seed as usize) % n;
    let mut v: Vec<usize> = (0..folds).map(|i| (offset + i * n / folds) % n).collect();
    v.sort_unstable();
    v
}

pub fn summarize_seed(seed: u64, strategy: Strategy, folds: Vec<FoldResult>) -> SeedSummary {
    let accepted: Vec<&FoldResult> = folds.iter().filter(|f| f.filtered.accepted_accuracy.is_some()).collect();
    let epochs: Vec<f64> = folds
        .iter()
        .filter_map(|f| f.epochs_to_target.map(|e| e as f64))
        .collect();
    SeedSummary {
        seed,
        strategy,
        accuracy: mean(folds.iter().map(|f| f.accuracy)).unwrap_or(f64::NAN),
        accepted_accuracy: mean(accepted.iter().filter_map(|f| f.filtered.accepted_accuracy)),
        accuracy_where_accepted: mean(accepted.iter().map(|f| f.accuracy)),
        acceptance_rate: mean(folds.iter().map(|f| f.filtered.acceptance_rate)).unwrap_or(0.0),
        median_epochs_to_target: median(&epochs),
        folds,
    }
}

pub fn summarize(seeds: Vec<SeedSummary>, strategies: &[Strategy]) -> BenchReport {
    let summary = strategies
        .iter()
        .map(|&s| {
            let rows: Vec<&SeedSummary> = seeds.iter().filter(|r| r.strategy == s).collect();
            let col = |f: &dyn Fn(&SeedSummary) -> Option<f64>| median(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            StrategySummary {
                strategy: s,
                median_accuracy: col(&|r| Some(r.accuracy)).unwrap_or(f64::NAN),
                median_accepted_accuracy: col(&|r| r.accepted_accuracy),
                median_accuracy_where_accepted: col(&|r| r.accuracy_where_accepted),
                median_acceptance_rate: col(&|r| Some(r.acceptance_rate)).unwrap_or(0.0),
                median_epochs_to_target: col(&|r| r.median_epochs_to_target),
            }
        })
        .collect();
    BenchReport { seeds, summary }
}

/// Runs one seed: corpus, then leave-one-subject-out for every strategy.
pub fn run_seed(cfg: &BenchConfig, seed: u64) -> Result<Vec<SeedSummary>, BenchError> {
    let spec = SynthSpec {
        seed,
        ..cfg.synth.clone()
    };
    let tasks = generate(&spec)?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let folds = held_out(tasks.len(), cfg.folds_per_seed, seed);
    let long = TrainConfig {
        finetune_epochs: cfg.convergence_epochs,
        ..tcfg.clone()
    };
    let mut convergence = Vec::new();
    let mut results = train::leave_one_subject_out_with(&tasks, &cfg.model, &tcfg, &cfg.strategies, Some(&folds), |a| {
        if cfg.convergence_epochs > 0 {
            convergence.push(train::finetune(a.init, a.target, &long)?.epochs_to_target);
        }
        Ok::<(), TrainError>(())
    })?;
    if cfg.convergence_epochs > 0 {
        for (r, e) in results.iter_mut().zip(convergence) {
            r.epochs_to_target = e;
        }
    }
    let mut by: BTreeMap<Strategy, Vec<FoldResult>> = BTreeMap::new();
    for r in results {
        by.entry(r.strategy).or_default().push(r);
    }
    Ok(cfg
        .strategies
        .iter()
        .map(|&s| summarize_seed(seed, s, by.remove(&s).unwrap_or_default()))
        .collect())
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.strategies.is_empty() || cfg.seeds.is_empty() {
        return Err(BenchError::Config("need at least one strategy and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        rows.extend(run_seed(cfg, seed)?);
    }
    Ok(summarize(rows, &cfg.strategies))
}
