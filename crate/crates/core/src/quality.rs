//! Subject screening with an abstaining classifier.
//!
//! A copy of the decoder with a third "reject" output is trained on each
//! subject alone under the gambler's loss. Windows the model cannot fit are
//! cheaper to bet on the reject output, so the mean reject probability is a
//! per-subject quality score: low for decodable subjects, high for noise.

use metabci_signal::Window;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::model::{init_model, ModelConfig, ModelError};
use crate::seed;
use crate::train::{self, Objective, Strategy, TrainConfig, TrainError};

/// Default share of screened subjects kept, 48 of 104.
pub const DEFAULT_FRACTION: f64 = 48.0 / 104.0;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("no screening reports to select from")]
    NoReports,
    #[error("invalid screening config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    /// Gambler payoff `o`, in (1, 2] for two classes.
    pub payoff: f64,
    /// Cross-entropy epochs before the gambler phase. Without them the
    /// all-reject solution can trap a model that has not yet found the
    /// class signal.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            payoff: 1.5,
            warmup_epochs: 5,
            epochs: 20,
            lr: 3e-3,
            minibatch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScreen {
    pub subject_id: String,
    pub n_windows: usize,
    pub mean_outlier_prob: Option<f64>,
    pub median_outlier_prob: Option<f64>,
    /// Class accuracy of the screening model on its own training windows.
    pub train_accuracy: Option<f64>,
    /// False when screening could not run (e.g. a single class).
    pub selectable: bool,
    pub note: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub payoff: f64,
    pub subjects: Vec<SubjectScreen>,
    pub selected: Vec<String>,
    pub selection_fraction: f64,
}

/// Screens one subject. The windows' `outlier_prob` fields are filled in.
pub fn screen_subject(
    subject_id: &str,
    windows: &mut [Window],
    model_cfg: &ModelConfig,
    cfg: &ScreenConfig,
) -> Result<SubjectScreen, QualityError> {
    let unselectable = |note: String| SubjectScreen {
        subject_id: subject_id.into(),
        n_windows: windows.len(),
        mean_outlier_prob: None,
        median_outlier_prob: None,
        train_accuracy: None,
        selectable: false,
        note: Some(note),
        selected: false,
    };
    let classes: Vec<u8> = [0u8, 1].into_iter().filter(|c| windows.iter().any(|w| w.label == *c)).collect();
    if classes.len() < 2 {
        log::warn!("{subject_id}: single-class data, not screened");
        return Ok(unselectable(format!("single class {classes:?}")));
    }
    let mcfg = ModelConfig {
        n_outputs: 3,
        ..model_cfg.clone()
    };
    let tcfg = TrainConfig {
        strategy: Strategy::Conventional,
        outer_lr: cfg.lr,
        epochs: cfg.epochs,
        minibatch: cfg.minibatch,
        objective: Objective::Gambler { payoff: cfg.payoff },
        seed: seed::derive(cfg.seed, &[seed::tag("screen"), seed::tag(subject_id)]),
        exec: Exec::Sequential,
        ..TrainConfig::default()
    };
    tcfg.validate().map_err(|e| QualityError::Config(e.to_string()))?;
    let init = init_model(&mcfg, tcfg.seed)?;
    // Unit RMS per subject, so louder recordings do not simply train faster.
    let (sq, n) = windows.iter().fold((0.0, 0usize), |(sq, n), w| {
        (sq + w.samples.data().iter().map(|v| v * v).sum::<f64>(), n + w.samples.len())
    });
    let rms = (sq / n.max(1) as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let training: Vec<Window> = windows
        .iter()
        .map(|w| Window {
            samples: w.samples.map(|v| v * scale),
            split: metabci_signal::Split::Train,
            ..w.clone()
        })
        .collect();
    let warm = TrainConfig {
        epochs: cfg.warmup_epochs,
        objective: Objective::CrossEntropy,
        seed: seed::derive(tcfg.seed, &[seed::tag("warmup")]),
        ..tcfg.clone()
    };
    let init = train::train_conventional_from(init, subject_id, &training, &warm)?.params;
    let trained = train::train_conventional_from(init, subject_id, &training, &tcfg)?.params;
    let probs = trained.output_probs(&training, 256)?;
    let mut p: Vec<f64> = probs.iter().map(|r| r[2]).collect();
    let correct = probs
        .iter()
        .zip(windows.iter())
        .filter(|(r, w)| u8::from(r[1] > r[0]) == w.label)
        .count();
    for (w, &q) in windows.iter_mut().zip(&p) {
        w.outlier_prob = Some(q);
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    p.sort_by(f64::total_cmp);
    let n = p.len();
    let median = if n % 2 == 1 { p[n / 2] } else { 0.5 * (p[n / 2 - 1] + p[n / 2]) };
    Ok(SubjectScreen {
        subject_id: subject_id.into(),
        n_windows: n,
        mean_outlier_prob: Some(mean),
        median_outlier_prob: Some(median),
        train_accuracy: Some(correct as f64 / n as f64),
        selectable: true,
        note: None,
        selected: false,
    })
}

/// Screens every subject; subjects are independent and run through `exec`.
pub fn screen_all(
    subjects: &mut [(String, Vec<Window>)],
    model_cfg: &ModelConfig,
    cfg: &ScreenConfig,
    exec: Exec,
) -> Result<Vec<SubjectScreen>, QualityError> {
    let results = exec.map(subjects, |(id, w)| {
        let mut w = w.clone();
        screen_subject(id, &mut w, model_cfg, cfg).map(|s| (s, w))
    });
    let mut out = Vec::with_capacity(results.len());
    for (slot, r) in subjects.iter_mut().zip(results) {
        let (s, w) = r?;
        slot.1 = w;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SelectionPolicy {
    /// Keep `round(f * n)` subjects with the lowest mean outlier probability.
    Fraction(f64),
    /// Keep subjects whose mean outlier probability is at most the value.
    Threshold(f64),
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::Fraction(DEFAULT_FRACTION)
    }
}

/// Ranks selectable subjects by mean outlier probability (ties by id) and
/// applies `policy`. Returns the report with `selected` flags set.
pub fn select_subjects(
    screens: Vec<SubjectScreen>,
    policy: SelectionPolicy,
    payoff: f64,
) -> Result<ScreeningReport, QualityError> {
    if screens.is_empty() {
        return Err(QualityError::NoReports);
    }
    let mut ranked: Vec<(f64, &str)> = screens
        .iter()
        .filter(|s| s.selectable)
        .filter_map(|s| s.mean_outlier_prob.map(|p| (p, s.subject_id.as_str())))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let keep = match policy {
        SelectionPolicy::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(QualityError::Config(format!("fraction {f} outside [0, 1]")));
            }
            ((f * screens.len() as f64).round() as usize).min(ranked.len())
        }
        SelectionPolicy::Threshold(t) => ranked.iter().take_while(|r| r.0 <= t).count(),
    };
    let mut selected: Vec<String> = ranked[..keep].iter().map(|r| r.1.to_string()).collect();
    selected.sort();
    let mut screens = screens;
    for s in &mut screens {
        s.selected = selected.binary_search(&s.subject_id).is_ok();
    }
    Ok(ScreeningReport {
        payoff,
        selection_fraction: selected.len() as f64 / screens.len() as f64,
        subjects: screens,
        selected,
    })
}
