//! Plain forward kernels. Shapes are validated by the caller.
//!
//! Convolution layout: input `[B, I, T]`, weights `[O, I, K]`, output
//! `[B, O, T']` with `T' = (T - K) / stride + 1` (valid, no padding).

use crate::tensor::Tensor;

pub(crate) fn conv_out_len(t: usize, k: usize, stride: usize) -> usize {
    (t - k) / stride + 1
}

pub(crate) fn conv(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
    let (b, i_ch, t) = dims3(x);
    let (o_ch, _, k) = dims3(w);
    let tp = conv_out_len(t, k, stride);
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; b * o_ch * tp];
    for bi in 0..b {
        for o in 0..o_ch {
            let y_row = &mut y[(bi * o_ch + o) * tp..(bi * o_ch + o + 1) * tp];
            for i in 0..i_ch {
                let x_row = &xd[(bi * i_ch + i) * t..(bi * i_ch + i + 1) * t];
                let w_row = &wd[(o * i_ch + i) * k..(o * i_ch + i + 1) * k];
                for (j, &wv) in w_row.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    if stride == 1 {
                        for (yv, xv) in y_row.iter_mut().zip(&x_row[j..j + tp]) {
                            *yv += wv * xv;
                        }
                    } else {
                        for (tt, yv) in y_row.iter_mut().enumerate() {
                            *yv += wv * x_row[tt * stride + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![b, o_ch, tp], y)
}

/// Gradient of `conv` with respect to its input.
pub(crate) fn conv_input_grad(gy: &Tensor, w: &Tensor, stride: usize, t: usize) -> Tensor {
    let (b, o_ch, tp) = dims3(gy);
    let (_, i_ch, k) = dims3(w);
    let gd = gy.data();
    let wd = w.data();
    let mut gx = vec![0.0; b * i_ch * t];
    for bi in 0..b {
        for o in 0..o_ch {
            let g_row = &gd[(bi * o_ch + o) * tp..(bi * o_ch + o + 1) * tp];
            for i in 0..i_ch {
                let x_row = &mut gx[(bi * i_ch + i) * t..(bi * i_ch + i + 1) * t];
                let w_row = &wd[(o * i_ch + i) * k..(o * i_ch + i + 1) * k];
                for (j, &wv) in w_row.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    if stride == 1 {
                        for (xv, gv) in x_row[j..j + tp].iter_mut().zip(g_row) {
                            *xv += wv * gv;
                        }
                    } else {
                        for (tt, gv) in g_row.iter().enumerate() {
                            x_row[tt * stride + j] += wv * gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![b, i_ch, t], gx)
}

/// Gradient of `conv` with respect to its weights (summed over the batch).
pub(crate) fn conv_weight_grad(gy: &Tensor, x: &Tensor, stride: usize, k: usize) -> Tensor {
    let (b, o_ch, tp) = dims3(gy);
    let (_, i_ch, t) = dims3(x);
    let gd = gy.data();
    let xd = x.data();
    let mut gw = vec![0.0; o_ch * i_ch * k];
    for bi in 0..b {
        for o in 0..o_ch {
            let g_row = &gd[(bi * o_ch + o) * tp..(bi * o_ch + o + 1) * tp];
            if g_row.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..i_ch {
                let x_row = &xd[(bi * i_ch + i) * t..(bi * i_ch + i + 1) * t];
                let w_row = &mut gw[(o * i_ch + i) * k..(o * i_ch + i + 1) * k];
                for (j, wv) in w_row.iter_mut().enumerate() {
                    let acc: f64 = if stride == 1 {
                        g_row.iter().zip(&x_row[j..j + tp]).map(|(g, x)| g * x).sum()
                    } else {
                        g_row
                            .iter()
                            .enumerate()
                            .map(|(tt, g)| g * x_row[tt * stride + j])
                            .sum()
                    };
                    *wv += acc;
                }
            }
        }
    }
    Tensor::from_parts(vec![o_ch, i_ch, k], gw)
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(xd[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

/// `[.., N] -> [..]`
pub(crate) fn sum_last(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let n = *shape.last().expect("rank >= 1");
    let data = x.data().chunks(n.max(1)).map(|c| c.iter().sum()).collect();
    Tensor::from_parts(shape[..shape.len() - 1].to_vec(), data)
}

/// `[..] -> [.., n]`, repeating each value.
pub(crate) fn expand_last(x: &Tensor, n: usize) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape.push(n);
    let mut data = Vec::with_capacity(x.len() * n);
    for &v in x.data() {
        data.extend(std::iter::repeat(v).take(n));
    }
    Tensor::from_parts(shape, data)
}

/// `[B, O, T] -> [O]`
pub(crate) fn sum_mid(x: &Tensor) -> Tensor {
    let (b, o, t) = dims3(x);
    let mut out = vec![0.0; o];
    for (row, chunk) in x.data().chunks(t.max(1)).enumerate().take(b * o) {
        out[row % o] += chunk.iter().sum::<f64>();
    }
    Tensor::from_parts(vec![o], out)
}

/// `[O] -> [B, O, T]`
pub(crate) fn expand_mid(x: &Tensor, b: usize, t: usize) -> Tensor {
    let o = x.len();
    let mut data = Vec::with_capacity(b * o * t);
    for _ in 0..b {
        for &v in x.data() {
            data.extend(std::iter::repeat(v).take(t));
        }
    }
    Tensor::from_parts(vec![b, o, t], data)
}

/// Rowwise gather on `[B, N]`: `out[b, j] = x[b, idx[b * M + j]]`.
pub(crate) fn gather(x: &Tensor, idx: &[usize], m: usize) -> Tensor {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * m);
    for bi in 0..b {
        for j in 0..m {
            out.push(xd[bi * n + idx[bi * m + j]]);
        }
    }
    Tensor::from_parts(vec![b, m], out)
}

/// Adjoint of `gather`: scatters `[B, M]` into zeros of `[B, N]`, summing collisions.
pub(crate) fn scatter(g: &Tensor, idx: &[usize], n: usize) -> Tensor {
    let (b, m) = (g.shape()[0], g.shape()[1]);
    let gd = g.data();
    let mut out = vec![0.0; b * n];
    for bi in 0..b {
        for j in 0..m {
            out[bi * n + idx[bi * m + j]] += gd[bi * m + j];
        }
    }
    Tensor::from_parts(vec![b, n], out)
}

/// Log-softmax along the last axis of `[B, N]`.
///
/// Computed as `(x - max) - ln_1p(sum of exp(x - max) over non-max entries)`,
/// which keeps the log-probability of a dominant class accurate.
pub(crate) fn log_softmax(x: &Tensor) -> Tensor {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let (arg, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let log_norm = rest.ln_1p();
        out.extend(row.iter().map(|&v| (v - max) - log_norm));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

pub(crate) fn elu_d1(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        v.exp()
    }
}

pub(crate) fn elu_d2(v: f64) -> f64 {
    if v > 0.0 {
        0.0
    } else {
        v.exp()
    }
}

fn dims3(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}
