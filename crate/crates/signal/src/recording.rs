//! Recordings, montages, and event-aligned trial extraction.

use std::fmt;

use metabci_autodiff::Tensor;
use thiserror::Error;

use crate::edf::{Annotation, EdfError, EdfFile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordingError {
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error("data signals disagree on sample rate: {0:?}")]
    MixedRates(Vec<f64>),
    #[error("recording has no data signals")]
    NoSignals,
    #[error("annotation onsets decrease at index {index}")]
    UnorderedAnnotations { index: usize },
    #[error("montage labels not found in recording: {}", .0.join(", "))]
    MissingChannels(Vec<String>),
}

/// One subject-run of multichannel EEG in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub run_id: String,
    pub sample_rate: f64,
    pub channel_labels: Vec<String>,
    /// `[channels, time]`
    pub samples: Tensor,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn n_channels(&self) -> usize {
        self.channel_labels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape().get(1).copied().unwrap_or(0)
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let t = self.n_samples();
        &self.samples.data()[i * t..(i + 1) * t]
    }

    /// Converts a parsed file, dropping annotation signals.
    pub fn from_edf(file: &EdfFile, subject_id: &str, run_id: &str) -> Result<Self, RecordingError> {
        let h = &file.header;
        let data: Vec<usize> = (0..h.signals.len())
            .filter(|&i| !h.signals[i].is_annotation())
            .collect();
        if data.is_empty() {
            return Err(RecordingError::NoSignals);
        }
        let rates: Vec<f64> = data
            .iter()
            .map(|&i| h.signals[i].samples_per_record as f64 / h.record_duration)
            .collect();
        if rates.iter().any(|&r| r != rates[0]) {
            return Err(RecordingError::MixedRates(rates));
        }
        let n = file.digital[data[0]].len();
        let mut samples = Vec::with_capacity(data.len() * n);
        for &i in &data {
            let s = &h.signals[i];
            samples.extend(file.digital[i].iter().map(|&d| s.to_physical(d)));
        }
        let mut annotations = file.annotations.clone();
        // Timekeeping TALs carry no text and are already dropped; keep file order.
        for (index, w) in annotations.windows(2).enumerate() {
            if w[1].onset < w[0].onset {
                return Err(RecordingError::UnorderedAnnotations { index: index + 1 });
            }
        }
        annotations.shrink_to_fit();
        Ok(Self {
            subject_id: subject_id.into(),
            run_id: run_id.into(),
            sample_rate: rates[0],
            channel_labels: data.iter().map(|&i| h.signals[i].label.clone()).collect(),
            samples: Tensor::new(vec![data.len(), n], samples).expect("sizes checked"),
            annotations,
        })
    }
}

/// Parses EDF bytes straight into a [`Recording`].
pub fn parse_edf(bytes: &[u8], subject_id: &str, run_id: &str) -> Result<Recording, RecordingError> {
    Recording::from_edf(&EdfFile::parse(bytes)?, subject_id, run_id)
}

/// Ordered channel labels to keep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Montage(pub Vec<String>);

impl Montage {
    /// The 17 motor-cortex channels as three symmetric strips:
    /// FC3..FC4, C5..C6, CP3..CP4.
    pub fn motor_cortex() -> Self {
        Self(
            [
                "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP3",
                "CP1", "CPz", "CP2", "CP4",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Case-insensitive label comparison key with dots and whitespace removed.
pub fn normalize_label(label: &str) -> String {
    label
        .chars()
        .filter(|c| *c != '.' && !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Keeps the montage channels, reordered to montage order.
pub fn select_channels(rec: &Recording, montage: &Montage) -> Result<Recording, RecordingError> {
    let keys: Vec<String> = rec.channel_labels.iter().map(|l| normalize_label(l)).collect();
    let mut rows = Vec::with_capacity(montage.len());
    let mut missing = Vec::new();
    for label in &montage.0 {
        let want = normalize_label(label);
        match keys.iter().position(|k| *k == want) {
            Some(i) => rows.push(i),
            None => missing.push(label.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(RecordingError::MissingChannels(missing));
    }
    let t = rec.n_samples();
    let mut data = Vec::with_capacity(rows.len() * t);
    for &r in &rows {
        data.extend_from_slice(rec.channel(r));
    }
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        run_id: rec.run_id.clone(),
        sample_rate: rec.sample_rate,
        channel_labels: montage.0.clone(),
        samples: Tensor::new(vec![rows.len(), t], data).expect("sizes checked"),
        annotations: rec.annotations.clone(),
    })
}

/// The two motor-imagery tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    /// Left fist vs right fist.
    Task2,
    /// Both fists vs both feet.
    Task4,
}

impl TaskId {
    pub const ALL: [TaskId; 2] = [TaskId::Task2, TaskId::Task4];

    /// Default imagery runs, one per session.
    pub fn default_runs(self) -> [u32; 3] {
        match self {
            TaskId::Task2 => [4, 8, 12],
            TaskId::Task4 => [6, 10, 14],
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TaskId::Task2 => 2,
            TaskId::Task4 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            2 => Some(TaskId::Task2),
            4 => Some(TaskId::Task4),
            _ => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.code())
    }
}

impl std::str::FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let code = s.trim().trim_start_matches("task").trim();
        code.parse::<u8>()
            .ok()
            .and_then(TaskId::from_code)
            .ok_or_else(|| format!("unknown task `{s}` (expected task2 or task4)"))
    }
}

/// One labelled motor-imagery trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// T1 → 0, T2 → 1.
    pub label: u8,
    pub task_id: TaskId,
    /// `[channels, time]`
    pub samples: Tensor,
    pub subject_id: String,
    /// 1-based position of the run among the task's runs.
    pub session_index: u8,
    pub sample_rate: f64,
}

impl Trial {
    pub fn n_samples(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialExtraction {
    pub trials: Vec<Trial>,
    /// Set when the run had no usable T1/T2 event.
    pub no_events: bool,
    /// Events that ran past the end of the recording.
    pub truncated_events: usize,
}

/// Sample range `[start, end)` covered by an annotation.
pub fn event_span(onset: f64, duration: f64, sample_rate: f64) -> (usize, usize) {
    let start = (onset * sample_rate).round().max(0.0) as usize;
    let end = ((onset + duration) * sample_rate).round().max(0.0) as usize;
    (start, end)
}

/// One trial per T1/T2 annotation; T0 (rest) is discarded.
pub fn extract_trials(rec: &Recording, task_id: TaskId, session_index: u8) -> TrialExtraction {
    let t = rec.n_samples();
    let c = rec.n_channels();
    let mut trials = Vec::new();
    let mut truncated = 0;
    for a in &rec.annotations {
        let label = match a.text.trim() {
            "T1" => 0,
            "T2" => 1,
            _ => continue,
        };
        let (start, end) = event_span(a.onset, a.duration, rec.sample_rate);
        if end > t || end <= start {
            truncated += 1;
            continue;
        }
        let mut data = Vec::with_capacity(c * (end - start));
        for ch in 0..c {
            data.extend_from_slice(&rec.channel(ch)[start..end]);
        }
        trials.push(Trial {
            label,
            task_id,
            samples: Tensor::new(vec![c, end - start], data).expect("sizes checked"),
            subject_id: rec.subject_id.clone(),
            session_index,
            sample_rate: rec.sample_rate,
        });
    }
    TrialExtraction {
        no_events: trials.is_empty(),
        trials,
        truncated_events: truncated,
    }
}
