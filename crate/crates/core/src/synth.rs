//! Seeded synthetic motor-imagery corpora with a known generating model.
//!
//! Two rhythmic sources sit over the left and right motor cortex. Class 0
//! carries `1 + class_sep` times more rhythm power on the left source than
//! the right, class 1 the reverse. A common log-normal gain per window varies
//! the signal-to-noise ratio without touching the power ratio. Sources reach
//! the 17 electrodes through a smooth base pattern rotated by a per-subject
//! random orthogonal matrix (Cayley transform of a scaled skew-symmetric
//! matrix), and white noise is added per channel.
//!
//! Subject `i` draws from `seed::rng(spec.seed, &[i])`.

use std::f64::consts::PI;
use std::sync::Arc;

use metabci_autodiff::Tensor;
use metabci_signal::{Split, TaskId, Window};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::task::SubjectTask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("task {0} is not synthetic")]
    NotSynthetic(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    /// Windows per class placed in the support set; the rest form the query.
    pub support_per_class: usize,
    pub fs: f64,
    pub window_s: f64,
    pub rhythm_hz: f64,
    pub class_sep: f64,
    pub subject_shift: f64,
    pub noise_std: f64,
    /// Standard deviation of the per-window log gain.
    pub gain_jitter: f64,
    #[serde(with = "crate::serde_str")]
    pub task_id: TaskId,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 12,
            trials_per_class: 40,
            support_per_class: 10,
            fs: 160.0,
            window_s: 1.0,
            rhythm_hz: 11.0,
            class_sep: 1.0,
            subject_shift: 0.5,
            noise_std: 1.0,
            gain_jitter: 0.5,
            task_id: TaskId::Task2,
            seed: 0,
        }
    }
}

/// Electrode grid positions (x: left to right, y: front to back) in the
/// motor-cortex montage order.
const POSITIONS: [(f64, f64); 17] = [
    (-2.0, 1.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (2.0, 1.0),
    (-3.0, 0.0),
    (-2.0, 0.0),
    (-1.0, 0.0),
    (0.0, 0.0),
    (1.0, 0.0),
    (2.0, 0.0),
    (3.0, 0.0),
    (-2.0, -1.0),
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
    (2.0, -1.0),
];

pub const N_CHANNELS: usize = 17;

/// Unit-norm scalp patterns of the left (C3) and right (C4) sources.
pub fn base_mixing() -> DMatrix<f64> {
    let mut a = DMatrix::zeros(N_CHANNELS, 2);
    for (col, cx) in [-2.0, 2.0].into_iter().enumerate() {
        for (row, &(x, y)) in POSITIONS.iter().enumerate() {
            let d2 = (x - cx) * (x - cx) + y * y;
            a[(row, col)] = (-d2 / (2.0 * 1.2 * 1.2)).exp();
        }
        let n = a.column(col).norm();
        a.column_mut(col).scale_mut(1.0 / n);
    }
    a
}

/// Orthogonal `(I - S)^-1 (I + S)` for skew-symmetric `S` scaled by `shift`.
fn random_rotation(shift: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let n = N_CHANNELS;
    let mut s = DMatrix::zeros(n, n);
    let scale = shift / 2.0 / (n as f64).sqrt();
    for i in 0..n {
        for j in i + 1..n {
            let g: f64 = StandardNormal.sample(rng);
            s[(i, j)] = scale * g;
            s[(j, i)] = -scale * g;
        }
    }
    let id = DMatrix::identity(n, n);
    (&id - &s).lu().solve(&(&id + &s)).expect("I - S is invertible for skew S")
}

/// Generating state of one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSubject {
    pub subject_id: String,
    /// `[17, 2]` source-to-electrode mixing.
    pub mixing: DMatrix<f64>,
    /// `[2, 17]` left inverse of `mixing`.
    pub unmixing: DMatrix<f64>,
    pub fs: f64,
    pub window_len: usize,
    pub rhythm_hz: f64,
    pub class_sep: f64,
    pub noise_std: f64,
    pub gain_jitter: f64,
}

impl SynthSubject {
    fn new(spec: &SynthSpec, subject_id: String, rng: &mut impl Rng) -> Self {
        let mixing = random_rotation(spec.subject_shift, rng) * base_mixing();
        let gram = mixing.transpose() * &mixing;
        let unmixing = gram.try_inverse().expect("independent source patterns") * mixing.transpose();
        Self {
            subject_id,
            mixing,
            unmixing,
            fs: spec.fs,
            window_len: (spec.window_s * spec.fs).round() as usize,
            rhythm_hz: spec.rhythm_hz,
            class_sep: spec.class_sep,
            noise_std: spec.noise_std,
            gain_jitter: spec.gain_jitter,
        }
    }

    /// One `[17, T]` window of class `label`.
    pub fn draw(&self, label: u8, rng: &mut impl Rng) -> Tensor {
        let t_len = self.window_len;
        let z: f64 = StandardNormal.sample(rng);
        let gain = (self.gain_jitter * z).exp();
        let strong = gain * (1.0 + self.class_sep).sqrt();
        let amps = if label == 0 { [strong, gain] } else { [gain, strong] };
        let w = 2.0 * PI * self.rhythm_hz / self.fs;
        let phases: [f64; 2] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
        let mut data = vec![0.0; N_CHANNELS * t_len];
        for t in 0..t_len {
            let s = [
                amps[0] * 2f64.sqrt() * (w * t as f64 + phases[0]).sin(),
                amps[1] * 2f64.sqrt() * (w * t as f64 + phases[1]).sin(),
            ];
            for ch in 0..N_CHANNELS {
                let noise: f64 = StandardNormal.sample(rng);
                data[ch * t_len + t] =
                    self.mixing[(ch, 0)] * s[0] + self.mixing[(ch, 1)] * s[1] + self.noise_std * noise;
            }
        }
        Tensor::new(vec![N_CHANNELS, t_len], data).expect("sized above")
    }

    /// Rhythm-bin power of each unmixed source.
    pub fn source_power(&self, window: &Tensor) -> [f64; 2] {
        let t_len = window.shape()[1];
        let x = DMatrix::from_row_slice(N_CHANNELS, t_len, window.data());
        let s = &self.unmixing * x;
        let w = 2.0 * PI * self.rhythm_hz / self.fs;
        let (cos, sin): (DVector<f64>, DVector<f64>) = (
            DVector::from_fn(t_len, |t, _| (w * t as f64).cos()),
            DVector::from_fn(t_len, |t, _| (w * t as f64).sin()),
        );
        let p = |row: usize| {
            let r = s.row(row);
            let (re, im) = (r.dot(&cos.transpose()), r.dot(&sin.transpose()));
            re * re + im * im
        };
        [p(0), p(1)]
    }

    /// Decision of the band-power discriminant that knows the true mixing.
    pub fn oracle_predict(&self, window: &Tensor) -> u8 {
        let [l, r] = self.source_power(window);
        u8::from(l <= r)
    }

    /// Oracle accuracy on `n` fresh windows per class.
    pub fn monte_carlo_accuracy(&self, n: usize, seed: u64) -> f64 {
        let mut rng = seed::rng(seed, &[seed::tag("monte-carlo")]);
        let mut correct = 0;
        for _ in 0..n {
            for label in [0u8, 1] {
                correct += usize::from(self.oracle_predict(&self.draw(label, &mut rng)) == label);
            }
        }
        correct as f64 / (2 * n) as f64
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Spec(m.into()));
        if self.n_subjects == 0 || self.trials_per_class == 0 {
            return err("n_subjects and trials_per_class must be at least 1");
        }
        if self.support_per_class == 0 || self.support_per_class >= self.trials_per_class {
            return err("support_per_class must be in [1, trials_per_class)");
        }
        if !(self.fs > 2.0 * self.rhythm_hz && self.rhythm_hz > 0.0) {
            return err("need fs > 2 * rhythm_hz > 0");
        }
        if (self.window_s * self.fs).round() < 1.0 {
            return err("window must hold at least one sample");
        }
        for (name, v) in [
            ("class_sep", self.class_sep),
            ("subject_shift", self.subject_shift),
            ("noise_std", self.noise_std),
            ("gain_jitter", self.gain_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Spec(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Builds one task per subject. Windows alternate class; the first
/// `support_per_class` of each class are support (session 1), the rest
/// query (sessions 2 and 3 alternating).
pub fn generate(spec: &SynthSpec) -> Result<Vec<SubjectTask>, SynthError> {
    spec.validate()?;
    let tasks = (0..spec.n_subjects)
        .map(|i| {
            let mut rng = seed::rng(spec.seed, &[i as u64]);
            let subject = SynthSubject::new(spec, format!("SYN{:03}", i + 1), &mut rng);
            let mut support = Vec::new();
            let mut query = Vec::new();
            for j in 0..spec.trials_per_class {
                for label in [0u8, 1] {
                    let in_support = j < spec.support_per_class;
                    let window = Window {
                        samples: subject.draw(label, &mut rng),
                        label,
                        subject_id: subject.subject_id.clone(),
                        task_id: spec.task_id,
                        session_index: if in_support { 1 } else { 2 + (j % 2) as u8 },
                        outlier_prob: None,
                        split: Split::Unassigned,
                    };
                    if in_support {
                        support.push(window);
                    } else {
                        query.push(window);
                    }
                }
            }
            SubjectTask {
                subject_id: subject.subject_id.clone(),
                task_id: spec.task_id,
                support,
                query,
                truth: Some(Arc::new(subject)),
            }
        })
        .collect();
    Ok(tasks)
}

/// Accuracy of the true-mixing band-power discriminant over all task windows.
pub fn oracle_accuracy(task: &SubjectTask) -> Result<f64, SynthError> {
    let truth = task
        .truth
        .as_ref()
        .ok_or_else(|| SynthError::NotSynthetic(task.subject_id.clone()))?;
    let (mut correct, mut n) = (0usize, 0usize);
    for w in task.windows() {
        correct += usize::from(truth.oracle_predict(&w.samples) == w.label);
        n += 1;
    }
    Ok(correct as f64 / n.max(1) as f64)
}
