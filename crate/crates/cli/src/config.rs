//! Experiment config file (TOML, versioned schema).
//!
//! Every table is optional; missing keys take their defaults. Unknown keys
//! are rejected so that typos do not silently fall back to defaults.
//!
//! ```toml
//! schema_version = 1
//! seed = 0
//! tasks = ["task2", "task4"]
//! strategies = ["conventional", "transfer", "maml"]
//!
//! [data]
//! source = "synth"          # synth | physionet | cache
//!
//! [synth]
//! n_subjects = 12
//!
//! [train]
//! epochs = 100
//!
//! [train_overrides.maml]    # per-strategy changes on top of [train]
//! inner_lr = 0.03
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metabci_core::model::ModelConfig;
use metabci_core::quality::{ScreenConfig, SelectionPolicy};
use metabci_core::synth::SynthSpec;
use metabci_core::train::{Strategy, TrainConfig};
use metabci_signal::dataset::IngestConfig;
use metabci_signal::{Montage, TaskId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Physionet,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of `S###/S###R##.edf` files.
    pub root: Option<PathBuf>,
    /// Window cache written by `ingest` or `synth`.
    pub cache: Option<PathBuf>,
    /// `sha256  relative/path` lines checked against `root` before ingesting.
    pub manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            root: None,
            cache: None,
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub band_hz: [f64; 2],
    pub filter_order: usize,
    pub window_s: f64,
    pub hop_s: f64,
    /// Channel labels; the 17 motor-cortex channels when absent.
    pub montage: Option<Vec<String>>,
    /// Per-subject standardisation with statistics from the support set.
    /// Applies to ingested and cached data; synthetic corpora are generated
    /// at model scale.
    pub standardize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let d = IngestConfig::default();
        Self {
            band_hz: [d.band.0, d.band.1],
            filter_order: d.filter_order,
            window_s: d.window_s,
            hop_s: d.hop_s,
            montage: None,
            standardize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn ingest_config(&self, tasks: &[TaskId]) -> IngestConfig {
        let base = IngestConfig::default();
        IngestConfig {
            montage: self.montage.clone().map(Montage).unwrap_or(base.montage),
            runs: tasks.iter().map(|&t| (t, t.default_runs())).collect(),
            tasks: tasks.to_vec(),
            band: (self.band_hz[0], self.band_hz[1]),
            filter_order: self.filter_order,
            window_s: self.window_s,
            hop_s: self.hop_s,
            ..base
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    pub enabled: bool,
    pub policy: SelectionPolicy,
    pub gambler: ScreenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Sessions whose windows form the support set of real data.
    pub support_sessions: Vec<u8>,
    /// Cap on support windows per class; 0 keeps all.
    pub support_per_class: usize,
    /// Subjects to hold out; empty holds out each subject in turn.
    pub held_out: Vec<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            support_sessions: vec![1],
            support_per_class: 0,
            held_out: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub tasks: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_overrides: BTreeMap<Strategy, toml::Table>,
    pub screening: ScreeningConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: PathBuf::from("results"),
            tasks: TaskId::ALL.iter().map(ToString::to_string).collect(),
            strategies: vec![Strategy::Conventional, Strategy::Transfer, Strategy::Maml],
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_overrides: BTreeMap::new(),
            screening: ScreeningConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema version {} is not supported (this build reads {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn task_ids(&self) -> Result<Vec<TaskId>> {
        if self.tasks.is_empty() {
            bail!("no tasks configured");
        }
        self.tasks.iter().map(|t| t.parse::<TaskId>().map_err(anyhow::Error::msg)).collect()
    }

    /// `[train]` with the strategy's overrides applied.
    pub fn train_for(&self, strategy: Strategy) -> Result<TrainConfig> {
        let Some(table) = self.train_overrides.get(&strategy) else {
            return Ok(TrainConfig {
                strategy,
                seed: self.seed,
                ..self.train.clone()
            });
        };
        let mut base = serde_json::to_value(&self.train)?;
        let patch = serde_json::to_value(table)?;
        if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
            for (k, v) in p {
                b.insert(k.clone(), v.clone());
            }
        }
        let cfg: TrainConfig =
            serde_json::from_value(base).with_context(|| format!("train_overrides.{strategy}"))?;
        Ok(TrainConfig {
            strategy,
            seed: self.seed,
            ..cfg
        })
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.task_ids()?;
        if self.strategies.is_empty() {
            bail!("no strategies configured");
        }
        self.model.validate()?;
        for &s in &self.strategies {
            self.train_for(s)?.validate()?;
        }
        if let Some(extra) = self.train_overrides.keys().find(|s| !self.strategies.contains(s)) {
            log::warn!("train_overrides.{extra} is set but {extra} is not run");
        }
        match self.data.source {
            DataSource::Synth => self.synth.validate()?,
            DataSource::Physionet => {
                let root = self.data.root.as_ref().context("data.source = physionet needs data.root")?;
                if !root.is_dir() {
                    bail!("data root {} is not a directory", root.display());
                }
            }
            DataSource::Cache => {
                let c = self.data.cache.as_ref().context("data.source = cache needs data.cache")?;
                if !c.is_file() {
                    bail!("cache {} does not exist", c.display());
                }
            }
        }
        if let Some(m) = &self.data.manifest {
            if !m.is_file() {
                bail!("manifest {} does not exist", m.display());
            }
        }
        if self.evaluation.support_sessions.is_empty() {
            bail!("evaluation.support_sessions is empty");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded, so the
    /// hash names the experiment rather than where it was written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex(&Sha256::digest(bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
