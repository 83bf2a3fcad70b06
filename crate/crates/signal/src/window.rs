//! Fixed-length labelled windows and per-channel standardisation.

use metabci_autodiff::Tensor;
use thiserror::Error;

use crate::recording::{TaskId, Trial};

/// Whether a window may feed a gradient.
///
/// Training code refuses windows tagged [`Split::Eval`], so held-out
/// evaluation data cannot leak into a parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Unassigned,
    Train,
    Eval,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Unassigned => 0,
            Split::Train => 1,
            Split::Eval => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Unassigned),
            1 => Some(Split::Train),
            2 => Some(Split::Eval),
            _ => None,
        }
    }
}

/// A labelled multichannel crop; the atomic training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `[channels, W]`
    pub samples: Tensor,
    pub label: u8,
    pub subject_id: String,
    pub task_id: TaskId,
    pub session_index: u8,
    /// Set only by quality screening.
    pub outlier_prob: Option<f64>,
    pub split: Split,
}

impl Window {
    pub fn n_channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowExtraction {
    pub windows: Vec<Window>,
    /// The trial was shorter than one window.
    pub too_short: bool,
}

/// Window length in samples for a duration in seconds.
pub fn window_len(window_s: f64, sample_rate: f64) -> usize {
    (window_s * sample_rate).round() as usize
}

/// Sample offsets of every window that fits entirely inside `n` samples.
pub fn window_offsets(n: usize, window: usize, hop: usize) -> Vec<usize> {
    if window == 0 || hop == 0 || n < window {
        return Vec::new();
    }
    (0..=n - window).step_by(hop).collect()
}

/// Crops a trial into windows at offsets `0, hop, 2 hop, ...`.
pub fn make_windows(trial: &Trial, window_s: f64, hop_s: f64) -> WindowExtraction {
    let fs = trial.sample_rate;
    let w = window_len(window_s, fs);
    let hop = window_len(hop_s, fs).max(1);
    let n = trial.n_samples();
    let c = trial.samples.shape()[0];
    let offsets = window_offsets(n, w, hop);
    let windows = offsets
        .iter()
        .map(|&off| {
            let mut data = Vec::with_capacity(c * w);
            for ch in 0..c {
                data.extend_from_slice(&trial.samples.data()[ch * n + off..ch * n + off + w]);
            }
            Window {
                samples: Tensor::new(vec![c, w], data).expect("sizes checked"),
                label: trial.label,
                subject_id: trial.subject_id.clone(),
                task_id: trial.task_id,
                session_index: trial.session_index,
                outlier_prob: None,
                split: Split::Unassigned,
            }
        })
        .collect();
    WindowExtraction {
        windows,
        too_short: w == 0 || n < w,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StandardizeError {
    #[error("cannot fit statistics on an empty training split")]
    Empty,
    #[error("window has {got} channels, statistics have {expected}")]
    Channels { expected: usize, got: usize },
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and standard deviation from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose deviation was floored to [`STD_FLOOR`].
    pub floored: Vec<usize>,
}

impl ChannelStats {
    pub fn fit(windows: &[Window]) -> Result<Self, StandardizeError> {
        let first = windows.first().ok_or(StandardizeError::Empty)?;
        let c = first.n_channels();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for w in windows {
            if w.n_channels() != c {
                return Err(StandardizeError::Channels {
                    expected: c,
                    got: w.n_channels(),
                });
            }
            let t = w.n_samples();
            for (ch, row) in w.samples.data().chunks(t.max(1)).enumerate().take(c) {
                sum[ch] += row.iter().sum::<f64>();
            }
            count += t;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; c];
        for w in windows {
            let t = w.n_samples();
            for (ch, row) in w.samples.data().chunks(t.max(1)).enumerate().take(c) {
                sq[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let mut floored = Vec::new();
        let std = sq
            .iter()
            .enumerate()
            .map(|(ch, s)| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    floored.push(ch);
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        if !floored.is_empty() {
            log::warn!("standardize: zero-variance channels {floored:?} floored to {STD_FLOOR}");
        }
        Ok(Self { mean, std, floored })
    }

    pub fn apply(&self, window: &mut Window) -> Result<(), StandardizeError> {
        let c = self.mean.len();
        if window.n_channels() != c {
            return Err(StandardizeError::Channels {
                expected: c,
                got: window.n_channels(),
            });
        }
        let t = window.n_samples();
        for (ch, row) in window.samples.data_mut().chunks_mut(t.max(1)).enumerate().take(c) {
            let (m, s) = (self.mean[ch], self.std[ch]);
            row.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

/// Fits statistics on `train` and applies the same affine map to both sets.
pub fn standardize(
    train: &mut [Window],
    held_out: &mut [Window],
) -> Result<ChannelStats, StandardizeError> {
    let stats = ChannelStats::fit(train)?;
    for w in train.iter_mut().chain(held_out.iter_mut()) {
        stats.apply(w)?;
    }
    Ok(stats)
}
