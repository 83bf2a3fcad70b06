//! Reverse-mode tape whose backward pass is itself recorded.
//!
//! Every backward rule is written in terms of tape operations, so the
//! gradients returned by [`Tape::grad`] with `create_graph = true` are
//! ordinary differentiable [`Var`]s. Differentiating them again yields exact
//! second-order terms.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::DiffError;
use crate::kernels;
use crate::params::ParamVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Recip,
    Elu,
    EluD1,
    EluD2,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Unary(usize, Unary),
    Conv {
        x: usize,
        w: usize,
        stride: usize,
    },
    ConvInputGrad {
        gy: usize,
        w: usize,
        stride: usize,
    },
    ConvWeightGrad {
        gy: usize,
        x: usize,
        stride: usize,
    },
    Reshape(usize),
    Permute(usize, Rc<[usize]>),
    SumAll(usize),
    ExpandAll(usize),
    SumLast(usize),
    ExpandLast(usize),
    SumMid(usize),
    ExpandMid(usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
    LogSoftmax(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Unary(_, u) => match u {
                Unary::Exp => "exp",
                Unary::Ln => "ln",
                Unary::Recip => "recip",
                Unary::Elu => "elu",
                Unary::EluD1 => "elu_d1",
                Unary::EluD2 => "elu_d2",
            },
            Op::Conv { .. } => "conv",
            Op::ConvInputGrad { .. } => "conv_input_grad",
            Op::ConvWeightGrad { .. } => "conv_weight_grad",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::SumAll(_) => "sum_all",
            Op::ExpandAll(_) => "expand_all",
            Op::SumLast(_) => "sum_last",
            Op::ExpandLast(_) => "expand_last",
            Op::SumMid(_) => "sum_mid",
            Op::ExpandMid(_) => "expand_mid",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf | Op::Const => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::Conv { x, w, .. } => [Some(x), Some(w)],
            Op::ConvInputGrad { gy, w, .. } => [Some(gy), Some(w)],
            Op::ConvWeightGrad { gy, x, .. } => [Some(gy), Some(x)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Unary(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SumAll(a)
            | Op::ExpandAll(a)
            | Op::SumLast(a)
            | Op::ExpandLast(a)
            | Op::SumMid(a)
            | Op::ExpandMid(a)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::LogSoftmax(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records operations in creation order, which is a topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf)
    }

    /// A value gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Const)
    }

    /// One leaf per tensor, in order.
    pub fn leaves(&self, params: &ParamVector) -> Vec<Var<'_>> {
        params.tensors().map(|t| self.leaf(t.clone())).collect()
    }

    /// Runs `f` without recording: every node it creates is a constant.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    fn push_raw(&self, value: Tensor, op: Op) -> Var<'_> {
        let op = if self.recording.get() { op } else { Op::Const };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the backward computation is recorded, so the
    /// returned vars can be differentiated again. Otherwise they are
    /// constants. Targets the loss does not depend on receive zeros.
    pub fn grad<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>, DiffError> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let loss_value = loss.value();
        if loss_value.len() != 1 {
            return Err(DiffError::Shape {
                op: "grad",
                detail: format!("loss must be scalar, shape is {:?}", loss_value.shape()),
            });
        }
        if !loss_value.all_finite() {
            return Err(self.first_non_finite(loss.id));
        }
        let n = loss.id + 1;
        let Some(min_target) = wrt.iter().map(|v| v.id).min() else {
            return Ok(Vec::new());
        };

        // needed[i]: node i depends on at least one target.
        let mut needed = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            for v in wrt {
                if v.id < n {
                    needed[v.id] = true;
                }
            }
            for i in min_target..n {
                if !needed[i] {
                    needed[i] = nodes[i]
                        .op
                        .inputs()
                        .iter()
                        .flatten()
                        .any(|&j| j >= min_target && needed[j]);
                }
            }
        }

        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        grads[loss.id] = Some(self.constant(Tensor::full(loss_value.shape(), 1.0)));
        for i in (min_target..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            for (j, gj) in self.backward(&op, i, g) {
                if !needed[j] {
                    continue;
                }
                grads[j] = Some(match grads[j] {
                    None => gj,
                    Some(prev) => prev.add_unchecked(gj),
                });
            }
        }
        self.recording.set(prev);

        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(v.value().shape())),
            })
            .collect())
    }

    fn first_non_finite(&self, upto: usize) -> DiffError {
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate().take(upto + 1) {
            if !node.value.all_finite() {
                return DiffError::NonFinite {
                    op: node.op.name(),
                    node: i,
                };
            }
        }
        DiffError::NonFinite {
            op: nodes[upto].op.name(),
            node: upto,
        }
    }

    /// Input gradients of node `id` given its output gradient `g`.
    fn backward<'t>(&'t self, op: &Op, id: usize, g: Var<'t>) -> Vec<(usize, Var<'t>)> {
        let out = self.var(id);
        match *op {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, g.neg())],
            Op::Mul(a, b) => vec![
                (a, g.mul_unchecked(self.var(b))),
                (b, g.mul_unchecked(self.var(a))),
            ],
            Op::Neg(a) => vec![(a, g.neg())],
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::Unary(a, u) => {
                let x = self.var(a);
                let ga = match u {
                    Unary::Exp => g.mul_unchecked(out),
                    Unary::Ln => g.mul_unchecked(x.recip()),
                    Unary::Recip => g.mul_unchecked(out).mul_unchecked(out).neg(),
                    Unary::Elu => g.mul_unchecked(x.unary(Unary::EluD1)),
                    Unary::EluD1 | Unary::EluD2 => g.mul_unchecked(x.unary(Unary::EluD2)),
                };
                vec![(a, ga)]
            }
            Op::Conv { x, w, stride } => {
                let (xv, wv) = (self.var(x), self.var(w));
                let t = xv.value().shape()[2];
                let k = wv.value().shape()[2];
                vec![
                    (x, g.conv_input_grad(wv, stride, t)),
                    (w, g.conv_weight_grad(xv, stride, k)),
                ]
            }
            Op::ConvInputGrad { gy, w, stride } => {
                let (gyv, wv) = (self.var(gy), self.var(w));
                let k = wv.value().shape()[2];
                vec![
                    (gy, g.conv_unchecked(wv, stride)),
                    (w, gyv.conv_weight_grad(g, stride, k)),
                ]
            }
            Op::ConvWeightGrad { gy, x, stride } => {
                let (gyv, xv) = (self.var(gy), self.var(x));
                let t = xv.value().shape()[2];
                vec![
                    (gy, xv.conv_unchecked(g, stride)),
                    (x, gyv.conv_input_grad(g, stride, t)),
                ]
            }
            Op::Reshape(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, g.reshape_unchecked(&shape))]
            }
            Op::Permute(a, ref perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(a, g.permute_unchecked(&inv))]
            }
            Op::SumAll(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, g.expand_all(&shape))]
            }
            Op::ExpandAll(a) => {
                let shape = self.value_of(a).shape().to_vec();
                vec![(a, g.sum_all().reshape_unchecked(&shape))]
            }
            Op::SumLast(a) => {
                let n = *self.value_of(a).shape().last().expect("rank >= 1");
                vec![(a, g.expand_last(n))]
            }
            Op::ExpandLast(a) => vec![(a, g.sum_last())],
            Op::SumMid(a) => {
                let s = self.value_of(a).shape().to_vec();
                vec![(a, g.expand_mid_unchecked(s[0], s[2]))]
            }
            Op::ExpandMid(a) => vec![(a, g.sum_mid_unchecked())],
            Op::Gather(a, ref idx) => {
                let n = self.value_of(a).shape()[1];
                vec![(a, g.scatter(Rc::clone(idx), n))]
            }
            Op::Scatter(a, ref idx) => {
                let m = self.value_of(a).shape()[1];
                vec![(a, g.gather_unchecked(Rc::clone(idx), m))]
            }
            Op::LogSoftmax(a) => {
                let n = *out.value().shape().last().expect("rank >= 1");
                let probs = out.exp();
                let row_sum = g.sum_last().expand_last(n);
                vec![(a, g.sub_unchecked(probs.mul_unchecked(row_sum)))]
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> Result<f64, DiffError> {
        self.value().item()
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push_raw(value, op)
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<(), DiffError> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.same_shape(other, "add")?;
        Ok(self.add_unchecked(other))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.same_shape(other, "sub")?;
        Ok(self.sub_unchecked(other))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.same_shape(other, "mul")?;
        Ok(self.mul_unchecked(other))
    }

    pub(crate) fn add_unchecked(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.push(v, Op::Add(self.id, other.id))
    }

    pub(crate) fn sub_unchecked(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.push(v, Op::Sub(self.id, other.id))
    }

    pub(crate) fn mul_unchecked(self, other: Var<'t>) -> Var<'t> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.push(v, Op::Mul(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|a| -a);
        self.push(v, Op::Neg(self.id))
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|a| a * c);
        self.push(v, Op::Scale(self.id, c))
    }

    fn unary(self, u: Unary) -> Var<'t> {
        let f: fn(f64) -> f64 = match u {
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Recip => f64::recip,
            Unary::Elu => kernels::elu,
            Unary::EluD1 => kernels::elu_d1,
            Unary::EluD2 => kernels::elu_d2,
        };
        let v = self.value().map(f);
        self.push(v, Op::Unary(self.id, u))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    /// Exponential linear unit, `x` for `x > 0` and `e^x - 1` otherwise.
    pub fn elu(self) -> Var<'t> {
        self.unary(Unary::Elu)
    }

    /// Elementwise square.
    pub fn square(self) -> Var<'t> {
        self.mul_unchecked(self)
    }

    /// Batched valid 1-D convolution.
    ///
    /// `self` is `[B, I, T]`, `weights` is `[O, I, K]`; the result is
    /// `[B, O, (T - K) / stride + 1]`.
    pub fn conv1d(self, weights: Var<'t>, stride: usize) -> Result<Var<'t>, DiffError> {
        let (x, w) = (self.value(), weights.value());
        if x.rank() != 3 || w.rank() != 3 {
            return Err(shape_err(
                "conv1d",
                format!("expected rank-3 input and weights, got {:?} and {:?}", x.shape(), w.shape()),
            ));
        }
        if stride == 0 {
            return Err(DiffError::Config("conv1d stride must be positive".into()));
        }
        if x.shape()[1] != w.shape()[1] {
            return Err(shape_err(
                "conv1d",
                format!("input has {} channels, weights expect {}", x.shape()[1], w.shape()[1]),
            ));
        }
        let k = w.shape()[2];
        if k == 0 {
            return Err(shape_err("conv1d", "kernel length is zero".into()));
        }
        if x.shape()[2] < k {
            return Err(DiffError::InputTooShort {
                op: "conv1d",
                needed: k,
                got: x.shape()[2],
            });
        }
        Ok(self.conv_unchecked(weights, stride))
    }

    fn conv_unchecked(self, weights: Var<'t>, stride: usize) -> Var<'t> {
        let v = kernels::conv(&self.value(), &weights.value(), stride);
        self.push(
            v,
            Op::Conv {
                x: self.id,
                w: weights.id,
                stride,
            },
        )
    }

    fn conv_input_grad(self, weights: Var<'t>, stride: usize, t: usize) -> Var<'t> {
        let v = kernels::conv_input_grad(&self.value(), &weights.value(), stride, t);
        self.push(
            v,
            Op::ConvInputGrad {
                gy: self.id,
                w: weights.id,
                stride,
            },
        )
    }

    fn conv_weight_grad(self, input: Var<'t>, stride: usize, k: usize) -> Var<'t> {
        let v = kernels::conv_weight_grad(&self.value(), &input.value(), stride, k);
        self.push(
            v,
            Op::ConvWeightGrad {
                gy: self.id,
                x: input.id,
                stride,
            },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let n: usize = shape.iter().product();
        let have = self.value().len();
        if n != have {
            return Err(shape_err("reshape", format!("{have} elements into {shape:?}")));
        }
        Ok(self.reshape_unchecked(shape))
    }

    fn reshape_unchecked(self, shape: &[usize]) -> Var<'t> {
        let v = Tensor::from_parts(shape.to_vec(), self.value().data().to_vec());
        self.push(v, Op::Reshape(self.id))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>, DiffError> {
        let rank = self.value().rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        Ok(self.permute_unchecked(perm))
    }

    fn permute_unchecked(self, perm: &[usize]) -> Var<'t> {
        let v = kernels::permute(&self.value(), perm);
        self.push(v, Op::Permute(self.id, perm.into()))
    }

    /// Sum of every element, as a rank-0 var.
    pub fn sum_all(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Arithmetic mean of every element.
    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    fn expand_all(self, shape: &[usize]) -> Var<'t> {
        let v = Tensor::full(shape, self.value().data()[0]);
        self.push(v, Op::ExpandAll(self.id))
    }

    /// Sums out the last axis.
    pub fn sum_last(self) -> Var<'t> {
        let v = kernels::sum_last(&self.value());
        self.push(v, Op::SumLast(self.id))
    }

    /// Appends an axis of length `n`, repeating values along it.
    pub fn expand_last(self, n: usize) -> Var<'t> {
        let v = kernels::expand_last(&self.value(), n);
        self.push(v, Op::ExpandLast(self.id))
    }

    /// Mean along the last axis. Fails on an empty axis.
    pub fn mean_last(self) -> Result<Var<'t>, DiffError> {
        let n = self.value().shape().last().copied().unwrap_or(0);
        if n == 0 {
            return Err(shape_err("mean_last", "empty time axis".into()));
        }
        Ok(self.sum_last().scale(1.0 / n as f64))
    }

    /// Broadcasts a per-channel `[O]` vector to `[B, O, T]`.
    pub fn expand_mid(self, batch: usize, time: usize) -> Result<Var<'t>, DiffError> {
        if self.value().rank() != 1 {
            return Err(shape_err("expand_mid", format!("expected rank 1, got {:?}", self.shape())));
        }
        Ok(self.expand_mid_unchecked(batch, time))
    }

    fn expand_mid_unchecked(self, batch: usize, time: usize) -> Var<'t> {
        let v = kernels::expand_mid(&self.value(), batch, time);
        self.push(v, Op::ExpandMid(self.id))
    }

    fn sum_mid_unchecked(self) -> Var<'t> {
        let v = kernels::sum_mid(&self.value());
        self.push(v, Op::SumMid(self.id))
    }

    /// Adds a per-channel bias `[O]` to a `[B, O, T]` var.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>, DiffError> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[1]] {
            return Err(shape_err(
                "add_channel_bias",
                format!("input {:?}, bias {:?}", s, bias.shape()),
            ));
        }
        Ok(self.add_unchecked(bias.expand_mid_unchecked(s[0], s[2])))
    }

    /// Rowwise gather on `[B, N]` with `M = idx.len() / B` picks per row.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t>, DiffError> {
        let s = self.shape();
        if s.len() != 2 || s[0] == 0 || idx.len() % s[0] != 0 {
            return Err(shape_err("gather", format!("input {:?}, {} indices", s, idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(DiffError::Index {
                op: "gather",
                index: bad,
                len: s[1],
            });
        }
        Ok(self.gather_unchecked(idx.into(), idx.len() / s[0]))
    }

    fn gather_unchecked(self, idx: Rc<[usize]>, m: usize) -> Var<'t> {
        let v = kernels::gather(&self.value(), &idx, m);
        self.push(v, Op::Gather(self.id, idx))
    }

    fn scatter(self, idx: Rc<[usize]>, n: usize) -> Var<'t> {
        let v = kernels::scatter(&self.value(), &idx, n);
        self.push(v, Op::Scatter(self.id, idx))
    }

    /// Log-softmax along the last axis of a `[B, N]` var.
    pub fn log_softmax(self) -> Result<Var<'t>, DiffError> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err("log_softmax", format!("expected [B, N], got {s:?}")));
        }
        let v = kernels::log_softmax(&self.value());
        Ok(self.push(v, Op::LogSoftmax(self.id)))
    }
}
