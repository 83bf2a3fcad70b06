//! Corpus discovery and the per-subject ingestion pipeline.
//!
//! Files are expected at `<root>/S###/S###R##.edf`. A run that fails to
//! parse is dropped on its own; a subject with any off-rate run or
//! malformed annotations is dropped entirely.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::edf::EdfError;
use crate::filter::{Bandpass, FilterError};
use crate::recording::{extract_trials, parse_edf, select_channels, Montage, RecordingError, TaskId};
use crate::window::{make_windows, Window};

pub const EXPECTED_RATE_HZ: f64 = 160.0;
pub const TRIALS_PER_RUN: usize = 15;

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub montage: Montage,
    pub tasks: Vec<TaskId>,
    /// Run numbers per task, in session order.
    pub runs: BTreeMap<TaskId, [u32; 3]>,
    pub expected_rate: f64,
    pub band: (f64, f64),
    pub filter_order: usize,
    pub window_s: f64,
    pub hop_s: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        let tasks = vec![TaskId::Task2, TaskId::Task4];
        Self {
            montage: Montage::motor_cortex(),
            runs: tasks.iter().map(|&t| (t, t.default_runs())).collect(),
            tasks,
            expected_rate: EXPECTED_RATE_HZ,
            band: (crate::filter::DEFAULT_LOW_HZ, crate::filter::DEFAULT_HIGH_HZ),
            filter_order: crate::filter::DEFAULT_ORDER,
            window_s: 2.0,
            hop_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scope {
    Subject,
    Run(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub subject_id: String,
    pub scope: Scope,
    pub reason: String,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scope {
            Scope::Subject => write!(f, "{}: subject excluded: {}", self.subject_id, self.reason),
            Scope::Run(r) => write!(f, "{}R{r:02}: run excluded: {}", self.subject_id, self.reason),
        }
    }
}

/// Trial count for one subject-task that differs from the expected 45.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDeviation {
    pub subject_id: String,
    pub task_id: TaskId,
    pub trials: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SubjectData {
    pub subject_id: String,
    pub windows: BTreeMap<TaskId, Vec<Window>>,
    pub trials: BTreeMap<TaskId, usize>,
    pub short_trials: usize,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub subjects_found: usize,
    pub subjects: Vec<SubjectData>,
    pub exclusions: Vec<Exclusion>,
    pub deviations: Vec<CountDeviation>,
}

impl IngestReport {
    pub fn subjects_excluded(&self) -> usize {
        self.exclusions.iter().filter(|e| e.scope == Scope::Subject).count()
    }
}

/// Subject directories named `S` followed by digits, sorted by id.
pub fn discover(root: &Path) -> io::Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let is_subject = name.len() > 1
            && name.starts_with('S')
            && name[1..].bytes().all(|b| b.is_ascii_digit());
        if is_subject && entry.file_type()?.is_dir() {
            found.push((name, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

pub fn run_path(subject_dir: &Path, subject_id: &str, run: u32) -> PathBuf {
    subject_dir.join(format!("{subject_id}R{run:02}.edf"))
}

enum RunOutcome {
    Windows { trials: usize, short: usize, windows: Vec<Window> },
    DropRun(String),
    DropSubject(String),
}

fn ingest_run(bytes: &[u8], subject_id: &str, run: u32, task: TaskId, session: u8, cfg: &IngestConfig) -> RunOutcome {
    let rec = match parse_edf(bytes, subject_id, &format!("R{run:02}")) {
        Ok(r) => r,
        Err(e @ RecordingError::Edf(EdfError::Annotation { .. }))
        | Err(e @ RecordingError::UnorderedAnnotations { .. }) => {
            return RunOutcome::DropSubject(format!("malformed annotations in run {run}: {e}"))
        }
        Err(e) => return RunOutcome::DropRun(e.to_string()),
    };
    if (rec.sample_rate - cfg.expected_rate).abs() > 1e-9 {
        return RunOutcome::DropSubject(format!(
            "run {run} sampled at {} Hz, expected {}",
            rec.sample_rate, cfg.expected_rate
        ));
    }
    let rec = match select_channels(&rec, &cfg.montage) {
        Ok(r) => r,
        Err(e) => return RunOutcome::DropRun(e.to_string()),
    };
    let filter = match Bandpass::design(cfg.band.0, cfg.band.1, rec.sample_rate, cfg.filter_order) {
        Ok(f) => f,
        Err(e) => return RunOutcome::DropRun(e.to_string()),
    };
    let mut rec = rec;
    rec.samples = filter.apply(&rec.samples).expect("recording is two-dimensional");
    let ex = extract_trials(&rec, task, session);
    if ex.no_events {
        log::warn!("{subject_id}R{run:02}: no T1/T2 events");
    }
    let mut windows = Vec::new();
    let mut short = 0;
    for t in &ex.trials {
        let w = make_windows(t, cfg.window_s, cfg.hop_s);
        if w.too_short {
            short += 1;
            log::warn!("{subject_id}R{run:02}: trial of {:.2} s shorter than window", t.duration());
        }
        windows.extend(w.windows);
    }
    RunOutcome::Windows {
        trials: ex.trials.len(),
        short,
        windows,
    }
}

/// Runs the pipeline for one subject directory.
pub fn ingest_subject(
    dir: &Path,
    subject_id: &str,
    cfg: &IngestConfig,
) -> (Option<SubjectData>, Vec<Exclusion>, Vec<CountDeviation>) {
    let mut data = SubjectData {
        subject_id: subject_id.to_string(),
        ..Default::default()
    };
    let mut exclusions = Vec::new();
    let mut deviations = Vec::new();
    for &task in &cfg.tasks {
        let runs = cfg.runs.get(&task).copied().unwrap_or(task.default_runs());
        let mut n_trials = 0;
        for (i, &run) in runs.iter().enumerate() {
            let path = run_path(dir, subject_id, run);
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    exclusions.push(Exclusion {
                        subject_id: subject_id.into(),
                        scope: Scope::Run(run),
                        reason: format!("{}: {e}", path.display()),
                    });
                    continue;
                }
            };
            match ingest_run(&bytes, subject_id, run, task, i as u8 + 1, cfg) {
                RunOutcome::Windows { trials, short, windows } => {
                    n_trials += trials;
                    data.short_trials += short;
                    data.windows.entry(task).or_default().extend(windows);
                }
                RunOutcome::DropRun(reason) => exclusions.push(Exclusion {
                    subject_id: subject_id.into(),
                    scope: Scope::Run(run),
                    reason,
                }),
                RunOutcome::DropSubject(reason) => {
                    exclusions.push(Exclusion {
                        subject_id: subject_id.into(),
                        scope: Scope::Subject,
                        reason,
                    });
                    return (None, exclusions, Vec::new());
                }
            }
        }
        data.trials.insert(task, n_trials);
        let expected = runs.len() * TRIALS_PER_RUN;
        if n_trials != expected {
            deviations.push(CountDeviation {
                subject_id: subject_id.into(),
                task_id: task,
                trials: n_trials,
                expected,
            });
        }
    }
    (Some(data), exclusions, deviations)
}

/// Validates the band once, then ingests every discovered subject.
pub fn ingest(root: &Path, cfg: &IngestConfig) -> Result<IngestReport, IngestError> {
    Bandpass::design(cfg.band.0, cfg.band.1, cfg.expected_rate, cfg.filter_order)?;
    let subjects = discover(root)?;
    let mut report = IngestReport {
        subjects_found: subjects.len(),
        ..Default::default()
    };
    for (id, dir) in subjects {
        let (data, ex, dev) = ingest_subject(&dir, &id, cfg);
        report.exclusions.extend(ex);
        report.deviations.extend(dev);
        report.subjects.extend(data);
    }
    Ok(report)
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Filter(#[from] FilterError),
}
