//! Three-stage convolutional decoder.
//!
//! A window `[channels, T]` passes through
//!
//! 1. a temporal convolution shared by every channel (`F` kernels of length `K`),
//! 2. a spatial convolution mixing all filters and channels into `M` maps,
//!    plus bias and activation,
//! 3. two strided classifier convolutions (the first activated), then a
//!    mean over time.
//!
//! Because the head averages over time, any input at least
//! [`ModelConfig::min_input_len`] samples long yields exactly `n_outputs`
//! logits. The temporal stage has no bias: it feeds a linear spatial stage
//! whose bias already covers it.

use std::io::{self, Read, Write};

use metabci_autodiff::{ops, DiffError, ParamVector, Tape, Tensor, Var};
use metabci_signal::Window;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {got} samples; this model needs at least {min}")]
    InputTooShort { min: usize, got: usize },
    #[error("input has {got} channels; model expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error("no windows given")]
    Empty,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (this build reads {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_temporal_filters: usize,
    pub temporal_klen: usize,
    pub temporal_stride: usize,
    pub n_spatial_maps: usize,
    pub classifier_channels: usize,
    pub classifier_klen: usize,
    pub classifier_stride: usize,
    /// 2 for plain classification, 3 with the reject output.
    pub n_outputs: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 17,
            n_temporal_filters: 32,
            temporal_klen: 33,
            temporal_stride: 1,
            n_spatial_maps: 16,
            classifier_channels: 16,
            classifier_klen: 11,
            classifier_stride: 3,
            n_outputs: 2,
            activation: Activation::Elu,
            init_seed: 0,
        }
    }
}

fn conv_len(t: usize, k: usize, stride: usize) -> Option<usize> {
    (t >= k).then(|| (t - k) / stride + 1)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("n_channels", self.n_channels),
            ("n_temporal_filters", self.n_temporal_filters),
            ("temporal_klen", self.temporal_klen),
            ("temporal_stride", self.temporal_stride),
            ("n_spatial_maps", self.n_spatial_maps),
            ("classifier_channels", self.classifier_channels),
            ("classifier_klen", self.classifier_klen),
            ("classifier_stride", self.classifier_stride),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !(2..=3).contains(&self.n_outputs) {
            return Err(ModelError::Config(format!(
                "n_outputs must be 2, or 3 with a reject output; got {}",
                self.n_outputs
            )));
        }
        Ok(())
    }

    /// Length of each stage's output for an input of `t` samples.
    pub fn stage_lengths(&self, t: usize) -> Option<[usize; 3]> {
        let t1 = conv_len(t, self.temporal_klen, self.temporal_stride)?;
        let t2 = conv_len(t1, self.classifier_klen, self.classifier_stride)?;
        let t3 = conv_len(t2, self.classifier_klen, self.classifier_stride)?;
        Some([t1, t2, t3])
    }

    /// Shortest input giving every convolution at least one output step.
    pub fn min_input_len(&self) -> usize {
        let k = self.classifier_klen;
        let s = self.classifier_stride;
        let t2 = k;
        let t1 = k + (t2 - 1) * s;
        self.temporal_klen + (t1 - 1) * self.temporal_stride
    }

    /// Receptive field of one output step, in samples.
    pub fn receptive_field(&self) -> usize {
        self.min_input_len()
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (f, k, m, c, ck, o) = (
            self.n_temporal_filters,
            self.temporal_klen,
            self.n_spatial_maps,
            self.classifier_channels,
            self.classifier_klen,
            self.n_outputs,
        );
        vec![
            ("temporal.weight", vec![f, 1, k]),
            ("spatial.weight", vec![m, f, self.n_channels]),
            ("spatial.bias", vec![m]),
            ("conv1.weight", vec![c, m, ck]),
            ("conv1.bias", vec![c]),
            ("conv2.weight", vec![o, c, ck]),
            ("conv2.bias", vec![o]),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Weights of one decoder together with the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: ParamVector,
}

/// Fan-in of each weight tensor; biases have none.
fn fan_in(shape: &[usize]) -> Option<usize> {
    (shape.len() == 3).then(|| shape[1] * shape[2])
}

/// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = seed::rng(seed, &[seed::tag("init")]);
    let entries = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = match fan_in(&shape) {
                Some(fan) => {
                    let a = (6.0 / fan as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                }
                None => vec![0.0; n],
            };
            (name.to_string(), Tensor::new(shape, data).expect("layout shapes"))
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        weights: ParamVector::new(entries)?,
    })
}

impl ModelParams {
    /// Checks that `weights` match the config layout.
    pub fn new(config: ModelConfig, weights: ParamVector) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        let ok = layout.len() == weights.len()
            && layout
                .iter()
                .zip(weights.iter())
                .all(|((n, s), (wn, wt))| *n == wn && s.as_slice() == wt.shape());
        if !ok {
            return Err(ModelError::Config("weights do not match the config layout".into()));
        }
        if !weights.all_finite() {
            return Err(ModelError::Config("weights contain non-finite values".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn with_weights(&self, weights: ParamVector) -> Self {
        Self {
            config: self.config.clone(),
            weights,
        }
    }

    /// Temporal kernels as an `[F, K]` matrix.
    pub fn temporal_kernels(&self) -> Tensor {
        let t = self.weights.get("temporal.weight").expect("layout");
        let (f, k) = (t.shape()[0], t.shape()[2]);
        t.reshaped(&[f, k]).expect("same size")
    }

    fn check_input(&self, windows: &[&Tensor]) -> Result<usize, ModelError> {
        let first = windows.first().ok_or(ModelError::Empty)?;
        let t = first.shape().get(1).copied().unwrap_or(0);
        for w in windows {
            let s = w.shape();
            if s.len() != 2 || s[0] != self.config.n_channels {
                return Err(ModelError::Channels {
                    expected: self.config.n_channels,
                    got: s.first().copied().unwrap_or(0),
                });
            }
            if s[1] != t {
                return Err(ModelError::Config("windows in a batch must share a length".into()));
            }
        }
        let min = self.config.min_input_len();
        if t < min {
            return Err(ModelError::InputTooShort { min, got: t });
        }
        Ok(t)
    }

    /// Logits `[n_outputs]` for one `[channels, T]` window.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor, ModelError> {
        let out = self.forward_batch(&[window])?;
        Ok(Tensor::vector(out.data().to_vec()))
    }

    /// Logits `[B, n_outputs]` for equal-length windows.
    pub fn forward_batch(&self, windows: &[&Tensor]) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let vars = tape.leaves(&self.weights);
        let x = tape.constant(stack(windows, self.check_input(windows)?));
        let out = tape.no_grad(|| logits(&self.config, &vars, x))?;
        Ok((*out.value()).clone())
    }

    /// Softmax over the class logits (the reject output, if any, is ignored).
    pub fn predict_proba(&self, window: &Tensor) -> Result<Vec<f64>, ModelError> {
        let z = self.forward(window)?;
        Ok(softmax(&z.data()[..2]))
    }

    /// Class probabilities for many windows, batched in groups of `chunk`.
    pub fn predict_windows(&self, windows: &[Window], chunk: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        self.softmax_windows(windows, chunk, 2)
    }

    /// Softmax over every output, reject component included.
    pub fn output_probs(&self, windows: &[Window], chunk: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        self.softmax_windows(windows, chunk, self.config.n_outputs)
    }

    fn softmax_windows(&self, windows: &[Window], chunk: usize, keep: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(windows.len());
        for group in windows.chunks(chunk.max(1)) {
            let refs: Vec<&Tensor> = group.iter().map(|w| &w.samples).collect();
            let z = self.forward_batch(&refs)?;
            let o = self.config.n_outputs;
            out.extend(z.data().chunks(o).map(|row| softmax(&row[..keep])));
        }
        Ok(out)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Stacks `[C, T]` windows into `[B, C, T]`.
pub fn stack(windows: &[&Tensor], t: usize) -> Tensor {
    let c = windows[0].shape()[0];
    let mut data = Vec::with_capacity(windows.len() * c * t);
    for w in windows {
        data.extend_from_slice(w.data());
    }
    Tensor::new(vec![windows.len(), c, t], data).expect("checked shapes")
}

/// Forward pass on a tape. `params` follow [`ModelConfig::layout`] order and
/// `x` is `[B, channels, T]`; returns `[B, n_outputs]`.
pub fn logits<'t>(cfg: &ModelConfig, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, DiffError> {
    let act = |v: Var<'t>| match cfg.activation {
        Activation::Elu => v.elu(),
    };
    let h = ops::conv_temporal_batch(x, params[0], cfg.temporal_stride)?;
    let h = act(ops::conv_spatial_batch(h, params[1])?.add_channel_bias(params[2])?);
    let h = act(h.conv1d(params[3], cfg.classifier_stride)?.add_channel_bias(params[4])?);
    let h = h.conv1d(params[5], cfg.classifier_stride)?.add_channel_bias(params[6])?;
    ops::mean_over_time(h)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MBCINET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// Writes the checkpoint container.
    ///
    /// Layout (little-endian): magic `MBCINET\0`, `u32` version, `u32` length
    /// plus JSON of the config, `u32` tensor count, then per tensor a
    /// `u16`-prefixed name, `u8` rank, `u32` dims and `f64` values.
    pub fn save<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        out.write_all(&(cfg.len() as u32).to_le_bytes())?;
        out.write_all(&cfg)?;
        out.write_all(&(self.weights.len() as u32).to_le_bytes())?;
        for (name, t) in self.weights.iter() {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[t.rank() as u8])?;
            for d in t.shape() {
                out.write_all(&(*d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, ModelError> {
        fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], ModelError> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|_| ModelError::Checkpoint("unexpected end of file".into()))?;
            Ok(b)
        }
        fn take_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, ModelError> {
            let mut v = Vec::new();
            r.take(n as u64).read_to_end(&mut v)?;
            if v.len() != n {
                return Err(ModelError::Checkpoint("unexpected end of file".into()));
            }
            Ok(v)
        }
        if &take::<_, 8>(&mut r)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let cfg_len = u32::from_le_bytes(take(&mut r)?) as usize;
        let config: ModelConfig = serde_json::from_slice(&take_vec(&mut r, cfg_len)?)
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let layout = config.layout();
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        if count != layout.len() {
            return Err(ModelError::Checkpoint(format!(
                "{count} tensors stored, config implies {}",
                layout.len()
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for (want_name, want_shape) in layout {
            let name_len = u16::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(take_vec(&mut r, name_len)?)
                .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = take::<_, 1>(&mut r)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut r)?) as usize);
            }
            if name != want_name || shape != want_shape {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match {want_name} {want_shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = take_vec(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        ModelParams::new(config, ParamVector::new(entries)?)
    }
}
