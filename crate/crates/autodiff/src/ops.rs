//! Model-level differentiable operations composed from tape primitives.

use crate::error::DiffError;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Applies each temporal kernel identically to every channel.
///
/// `input` is `[channels, time]`, `kernels` is `[filters, 1, klen]`; the
/// result is `[filters, channels, time']` with
/// `time' = (time - klen) / stride + 1`.
pub fn conv_temporal<'t>(
    input: Var<'t>,
    kernels: Var<'t>,
    stride: usize,
) -> Result<Var<'t>, DiffError> {
    let s = input.shape();
    if s.len() != 2 {
        return Err(DiffError::Shape {
            op: "conv_temporal",
            detail: format!("expected [channels, time], got {s:?}"),
        });
    }
    check_temporal_kernels(&kernels.shape())?;
    let (channels, time) = (s[0], s[1]);
    let out = input.reshape(&[channels, 1, time])?.conv1d(kernels, stride)?;
    out.permute(&[1, 0, 2])
}

/// Batched form of [`conv_temporal`] used by the model.
///
/// `input` is `[batch, channels, time]`; the result is
/// `[batch, channels * filters, time']` with the filter index varying
/// fastest.
pub fn conv_temporal_batch<'t>(
    input: Var<'t>,
    kernels: Var<'t>,
    stride: usize,
) -> Result<Var<'t>, DiffError> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(DiffError::Shape {
            op: "conv_temporal",
            detail: format!("expected [batch, channels, time], got {s:?}"),
        });
    }
    let ks = kernels.shape();
    check_temporal_kernels(&ks)?;
    let (batch, channels, time) = (s[0], s[1], s[2]);
    let out = input
        .reshape(&[batch * channels, 1, time])?
        .conv1d(kernels, stride)?;
    let tp = out.shape()[2];
    out.reshape(&[batch, channels * ks[0], tp])
}

fn check_temporal_kernels(ks: &[usize]) -> Result<(), DiffError> {
    if ks.len() != 3 || ks[1] != 1 {
        return Err(DiffError::Shape {
            op: "conv_temporal",
            detail: format!("kernels must be [filters, 1, klen], got {ks:?}"),
        });
    }
    Ok(())
}

/// Full-height spatial convolution.
///
/// `input` is `[filters, channels, time']`, `weights` is
/// `[maps, filters, channels]`; each output map is a linear combination over
/// all filters and channels at each time step, giving `[maps, time']`.
pub fn conv_spatial<'t>(input: Var<'t>, weights: Var<'t>) -> Result<Var<'t>, DiffError> {
    let s = input.shape();
    let ws = weights.shape();
    if s.len() != 3 || ws.len() != 3 || ws[1] != s[0] || ws[2] != s[1] {
        return Err(DiffError::Shape {
            op: "conv_spatial",
            detail: format!("input {s:?}, weights {ws:?}"),
        });
    }
    let (f, c, tp) = (s[0], s[1], s[2]);
    let m = ws[0];
    let x = input.reshape(&[1, f * c, tp])?;
    let w = weights.reshape(&[m, f * c, 1])?;
    x.conv1d(w, 1)?.reshape(&[m, tp])
}

/// Batched spatial convolution over the output of [`conv_temporal_batch`].
///
/// `input` is `[batch, channels * filters, time']` (filter fastest) and
/// `weights` is `[maps, filters, channels]`; returns `[batch, maps, time']`.
pub fn conv_spatial_batch<'t>(input: Var<'t>, weights: Var<'t>) -> Result<Var<'t>, DiffError> {
    let s = input.shape();
    let ws = weights.shape();
    if s.len() != 3 || ws.len() != 3 || ws[1] * ws[2] != s[1] {
        return Err(DiffError::Shape {
            op: "conv_spatial",
            detail: format!("input {s:?}, weights {ws:?}"),
        });
    }
    let (m, f, c) = (ws[0], ws[1], ws[2]);
    let w = weights.permute(&[0, 2, 1])?.reshape(&[m, c * f, 1])?;
    input.conv1d(w, 1)
}

/// Mean over the last (time) axis.
pub fn mean_over_time(input: Var<'_>) -> Result<Var<'_>, DiffError> {
    input.mean_last()
}

/// Cross-entropy of a single logit vector against `label`.
pub fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>, DiffError> {
    let s = logits.shape();
    if s.len() != 1 {
        return Err(DiffError::Shape {
            op: "cross_entropy",
            detail: format!("expected [classes], got {s:?}"),
        });
    }
    cross_entropy_batch(logits.reshape(&[1, s[0]])?, &[label])
}

/// Mean cross-entropy over a `[batch, classes]` logit matrix.
pub fn cross_entropy_batch<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>, DiffError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(DiffError::Shape {
            op: "cross_entropy",
            detail: format!("logits {s:?} with {} labels", labels.len()),
        });
    }
    if s[1] < 2 {
        return Err(DiffError::Config("cross_entropy needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(DiffError::Index {
            op: "cross_entropy",
            index: bad,
            len: s[1],
        });
    }
    let picked = logits.log_softmax()?.gather(labels)?;
    Ok(picked.mean_all().neg())
}

/// Gambler's loss of a single `[classes + 1]` logit vector whose last entry
/// is the reject output.
pub fn gambler_loss<'t>(logits: Var<'t>, label: usize, payoff: f64) -> Result<Var<'t>, DiffError> {
    let s = logits.shape();
    if s.len() != 1 {
        return Err(DiffError::Shape {
            op: "gambler_loss",
            detail: format!("expected [classes + 1], got {s:?}"),
        });
    }
    gambler_loss_batch(logits.reshape(&[1, s[0]])?, &[label], payoff)
}

/// Mean gambler's loss `-ln(p_label + p_reject / payoff)` over a batch.
///
/// Evaluated in log space as `-logsumexp(ln p_label, ln p_reject - ln payoff)`.
/// The payoff must lie in `(1, classes]`.
pub fn gambler_loss_batch<'t>(
    logits: Var<'t>,
    labels: &[usize],
    payoff: f64,
) -> Result<Var<'t>, DiffError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(DiffError::Shape {
            op: "gambler_loss",
            detail: format!("logits {s:?} with {} labels", labels.len()),
        });
    }
    if s[1] < 3 {
        return Err(DiffError::Config(
            "gambler_loss needs at least two classes plus a reject output".into(),
        ));
    }
    let classes = s[1] - 1;
    if !(payoff > 1.0 && payoff <= classes as f64) {
        return Err(DiffError::Config(format!(
            "gambler payoff {payoff} outside (1, {classes}]"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(DiffError::Index {
            op: "gambler_loss",
            index: bad,
            len: classes,
        });
    }
    let batch = labels.len();
    let idx: Vec<usize> = labels.iter().flat_map(|&l| [l, classes]).collect();
    let log_p = logits.log_softmax()?.gather(&idx)?;
    let offset: Vec<f64> = (0..batch).flat_map(|_| [0.0, -payoff.ln()]).collect();
    let offset = logits.tape().constant(Tensor::new(vec![batch, 2], offset)?);
    let z = log_p.add(offset)?;
    // -logsumexp(z) = log_softmax(z)[0] - z[0]
    let first: Vec<usize> = vec![0; batch];
    let per_row = z.log_softmax()?.gather(&first)?.sub(z.gather(&first)?)?;
    Ok(per_row.mean_all())
}
