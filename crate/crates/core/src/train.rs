//! Training strategies, fine-tuning and evaluation.
//!
//! All strategies share one schedule. In epoch `e` each task's support set
//! (and query set) is shuffled by a permutation keyed on `(seed, e)` and cut
//! into minibatches; an epoch has as many outer steps as the largest task has
//! minibatches (support, or query too for the meta-learners), and shorter
//! lists wrap around. Per-task gradients may be computed in parallel but are
//! reduced in task order.

use metabci_autodiff::{ops, DiffError, ParamVector, Tape, Tensor, Var};
use metabci_signal::{Split, Window};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::model::{self, init_model, ModelConfig, ModelError, ModelParams};
use crate::seed;
use crate::task::SubjectTask;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("subject {subject}: empty {set} set")]
    EmptySet { subject: String, set: &'static str },
    #[error("training data for {0} has a single class")]
    SingleClass(String),
    #[error("held-out window of subject {0} reached a gradient computation")]
    Leak(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Random initialisation, no source subjects.
    Conventional,
    /// Pretraining on pooled source subjects with averaged gradients.
    Transfer,
    Maml,
    Fomaml,
    Reptile,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Conventional,
        Strategy::Transfer,
        Strategy::Maml,
        Strategy::Fomaml,
        Strategy::Reptile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Conventional => "conventional",
            Strategy::Transfer => "transfer",
            Strategy::Maml => "maml",
            Strategy::Fomaml => "fomaml",
            Strategy::Reptile => "reptile",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    CrossEntropy,
    Gambler { payoff: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OuterOptimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OuterOptimizer {
    fn default() -> Self {
        OuterOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Inner-loop (and fine-tuning) gradient-descent step, α.
    pub inner_lr: f64,
    /// Outer-loop step, β.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub reptile_steps: usize,
    /// Tasks per outer step; 0 uses every task.
    pub meta_batch_size: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub finetune_epochs: usize,
    /// Fine-tuning step; defaults to `inner_lr`.
    pub finetune_lr: Option<f64>,
    pub objective: Objective,
    pub optimizer: OuterOptimizer,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Maml,
            inner_lr: 0.01,
            outer_lr: 1e-3,
            inner_steps: 1,
            reptile_steps: 5,
            meta_batch_size: 0,
            epochs: 100,
            minibatch: 16,
            finetune_epochs: 50,
            finetune_lr: None,
            objective: Objective::CrossEntropy,
            optimizer: OuterOptimizer::default(),
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    /// `inner_lr = 0` and `inner_steps = 0` are accepted: they are the
    /// degenerate settings under which the strategies coincide.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad(format!("inner_lr must be non-negative, got {}", self.inner_lr));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if self.minibatch == 0 {
            return bad("minibatch must be at least 1".into());
        }
        if self.strategy == Strategy::Reptile && self.reptile_steps < 2 {
            return bad(format!(
                "reptile needs at least 2 inner steps (1 degenerates to joint training), got {}",
                self.reptile_steps
            ));
        }
        if let Some(lr) = self.finetune_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("finetune_lr must be non-negative, got {lr}"));
            }
        }
        if let Objective::Gambler { payoff } = self.objective {
            if !(payoff > 1.0 && payoff <= 2.0) {
                return bad(format!("gambler payoff must be in (1, 2], got {payoff}"));
            }
        }
        Ok(())
    }

    pub fn finetune_lr(&self) -> f64 {
        self.finetune_lr.unwrap_or(self.inner_lr)
    }
}

/// A stacked minibatch ready for the tape.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Refuses windows tagged [`Split::Eval`].
    pub fn training(windows: &[&Window]) -> Result<Self, TrainError> {
        if let Some(w) = windows.iter().find(|w| w.split == Split::Eval) {
            return Err(TrainError::Leak(w.subject_id.clone()));
        }
        Self::any(windows)
    }

    fn any(windows: &[&Window]) -> Result<Self, TrainError> {
        let first = windows.first().ok_or_else(|| TrainError::Data("empty minibatch".into()))?;
        let t = first.n_samples();
        if windows.iter().any(|w| w.samples.shape() != first.samples.shape()) {
            return Err(TrainError::Data("windows in a minibatch differ in shape".into()));
        }
        let refs: Vec<&Tensor> = windows.iter().map(|w| &w.samples).collect();
        Ok(Self {
            x: model::stack(&refs, t),
            labels: windows.iter().map(|w| usize::from(w.label)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn loss_on<'t>(
    cfg: &ModelConfig,
    objective: Objective,
    params: &[Var<'t>],
    batch: &Batch,
) -> Result<Var<'t>, TrainError> {
    let t = batch.x.shape()[2];
    let min = cfg.min_input_len();
    if t < min {
        return Err(ModelError::InputTooShort { min, got: t }.into());
    }
    let tape = params[0].tape();
    let z = model::logits(cfg, params, tape.constant(batch.x.clone()))?;
    Ok(match objective {
        Objective::CrossEntropy => ops::cross_entropy_batch(z, &batch.labels)?,
        Objective::Gambler { payoff } => ops::gambler_loss_batch(z, &batch.labels, payoff)?,
    })
}

fn to_params(template: &ParamVector, vars: &[Var<'_>]) -> ParamVector {
    template
        .with_tensors(vars.iter().map(|v| (*v.value()).clone()).collect())
        .expect("gradients share the parameter layout")
}

/// Loss and gradient of `objective` on one batch.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch, objective: Objective) -> Result<(f64, ParamVector), TrainError> {
    let tape = Tape::new();
    let theta = tape.leaves(&params.weights);
    let loss = loss_on(&params.config, objective, &theta, batch)?;
    let g = tape.grad(loss, &theta, false)?;
    Ok((loss.item()?, to_params(&params.weights, &g)))
}

pub fn batch_loss(params: &ModelParams, batch: &Batch, objective: Objective) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let theta = tape.leaves(&params.weights);
    let loss = tape.no_grad(|| loss_on(&params.config, objective, &theta, batch))?;
    Ok(loss.item()?)
}

/// Losses and meta-gradient contribution of one task.
#[derive(Debug, Clone)]
pub struct TaskGrad {
    /// Support loss before adaptation, `L_i`.
    pub inner_loss: f64,
    /// Query loss after adaptation, `L'_i`; absent for pooled pretraining.
    pub outer_loss: Option<f64>,
    pub grad: ParamVector,
}

/// Losses and gradient returned by [`adapted_gradient`].
#[derive(Debug, Clone)]
pub struct Adapted {
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub grad: ParamVector,
}

/// Gradient with respect to θ of `query(θ')` at the adapted parameters
/// `θ' = θ - α ∇support(θ)`, the inner step repeated `inner_steps` times.
///
/// With `second_order` the inner gradients stay on the tape, giving the full
/// MAML meta-gradient. Without it they are constants, so `∂θ'/∂θ = I` and the
/// result is the first-order approximation.
pub fn adapted_gradient<S, Q>(
    theta0: &ParamVector,
    support: S,
    query: Q,
    inner_lr: f64,
    inner_steps: usize,
    second_order: bool,
) -> Result<Adapted, TrainError>
where
    S: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, TrainError>,
    Q: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, TrainError>,
{
    let tape = Tape::new();
    let theta = tape.leaves(theta0);
    let mut phi = theta.clone();
    let mut inner_loss = None;
    for _ in 0..inner_steps {
        let l = support(&phi)?;
        inner_loss.get_or_insert(l.item()?);
        let g = tape.grad(l, &phi, second_order)?;
        phi = phi
            .iter()
            .zip(&g)
            .map(|(p, g)| p.sub(g.scale(inner_lr)))
            .collect::<Result<_, _>>()?;
    }
    let inner_loss = match inner_loss {
        Some(l) => l,
        None => tape.no_grad(|| support(&theta))?.item()?,
    };
    let lq = query(&phi)?;
    let g = tape.grad(lq, &theta, false)?;
    Ok(Adapted {
        inner_loss,
        outer_loss: lq.item()?,
        grad: to_params(theta0, &g),
    })
}

/// [`adapted_gradient`] for the decoder on one support and one query batch.
pub fn adapted_query_grad(
    params: &ModelParams,
    support: &Batch,
    query: &Batch,
    cfg: &TrainConfig,
    second_order: bool,
) -> Result<TaskGrad, TrainError> {
    let mc = &params.config;
    let a = adapted_gradient(
        &params.weights,
        |p| loss_on(mc, cfg.objective, p, support),
        |p| loss_on(mc, cfg.objective, p, query),
        cfg.inner_lr,
        cfg.inner_steps,
        second_order,
    )?;
    Ok(TaskGrad {
        inner_loss: a.inner_loss,
        outer_loss: Some(a.outer_loss),
        grad: a.grad,
    })
}

/// Adaptive-moment or plain-gradient outer optimiser.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OuterOptimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OuterOptimizer, lr: f64, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector) -> Result<ParamVector, TrainError> {
        let mut p = params.flatten();
        let g = grad.flatten();
        if p.len() != g.len() || p.len() != self.m.len() {
            return Err(TrainError::Data("gradient does not match parameters".into()));
        }
        self.t += 1;
        match self.kind {
            OuterOptimizer::Sgd => p.iter_mut().zip(&g).for_each(|(p, g)| *p -= self.lr * g),
            OuterOptimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..p.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    p[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(params.unflatten(&p)?)
    }
}

/// Minibatch index lists for a set of `n` windows in `epoch`.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &[seed::tag("epoch"), epoch as u64]));
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

fn pick<'a>(windows: &'a [Window], idx: &[usize]) -> Vec<&'a Window> {
    idx.iter().map(|&i| &windows[i]).collect()
}

/// One epoch record of the structured training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub version: u32,
    pub strategy: Strategy,
    pub epoch: usize,
    pub meta_loss: f64,
    pub subjects: Vec<SubjectLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectLoss {
    pub subject_id: String,
    pub inner_loss: f64,
    pub outer_loss: Option<f64>,
}

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

fn check_tasks(tasks: &[SubjectTask], need_query: bool) -> Result<(), TrainError> {
    for t in tasks {
        if t.support.is_empty() {
            return Err(TrainError::EmptySet {
                subject: t.subject_id.clone(),
                set: "support",
            });
        }
        if need_query && t.query.is_empty() {
            return Err(TrainError::EmptySet {
                subject: t.subject_id.clone(),
                set: "query",
            });
        }
    }
    Ok(())
}

fn select_tasks(n: usize, cfg: &TrainConfig, epoch: usize, step: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if cfg.meta_batch_size == 0 || cfg.meta_batch_size >= n {
        return all;
    }
    all.shuffle(&mut seed::rng(cfg.seed, &[seed::tag("tasks"), epoch as u64, step as u64]));
    let mut chosen = all[..cfg.meta_batch_size].to_vec();
    chosen.sort_unstable();
    chosen
}

fn mean_params(grads: &[&ParamVector]) -> Result<ParamVector, TrainError> {
    let mut acc = grads[0].zeros_like();
    for g in grads {
        acc = acc.add_scaled(g, 1.0)?;
    }
    Ok(acc.scaled(1.0 / grads.len() as f64))
}

/// Shared outer loop for pooled, MAML and first-order MAML training.
fn outer_loop(init: ModelParams, tasks: &[SubjectTask], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let adaptive = matches!(cfg.strategy, Strategy::Maml | Strategy::Fomaml);
    check_tasks(tasks, adaptive)?;
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.outer_lr, params.weights.total_len());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plans: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)> = tasks
            .iter()
            .map(|t| {
                (
                    epoch_batches(cfg.seed, epoch, t.support.len(), cfg.minibatch),
                    epoch_batches(cfg.seed, epoch, t.query.len(), cfg.minibatch),
                )
            })
            .collect();
        let steps = plans
            .iter()
            .map(|p| if adaptive { p.0.len().max(p.1.len()) } else { p.0.len() })
            .max()
            .unwrap_or(0);
        let mut totals: Vec<(f64, Option<f64>, usize)> = vec![(0.0, None, 0); tasks.len()];
        let mut meta_total = 0.0;
        for step in 0..steps {
            let chosen = select_tasks(tasks.len(), cfg, epoch, step);
            let results: Vec<Result<TaskGrad, TrainError>> = cfg.exec.map(&chosen, |&i| {
                let t = &tasks[i];
                let (sp, qp) = &plans[i];
                let support = Batch::training(&pick(&t.support, &sp[step % sp.len()]))?;
                if adaptive {
                    let query = Batch::training(&pick(&t.query, &qp[step % qp.len()]))?;
                    adapted_query_grad(&params, &support, &query, cfg, cfg.strategy == Strategy::Maml)
                } else {
                    let (l, g) = loss_and_grad(&params, &support, cfg.objective)?;
                    Ok(TaskGrad {
                        inner_loss: l,
                        outer_loss: None,
                        grad: g,
                    })
                }
            });
            let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
            let grads: Vec<&ParamVector> = results.iter().map(|r| &r.grad).collect();
            let g = mean_params(&grads)?;
            params = params.with_weights(opt.step(&params.weights, &g)?);
            let mut step_loss = 0.0;
            for (&i, r) in chosen.iter().zip(&results) {
                let e = &mut totals[i];
                e.0 += r.inner_loss;
                if let Some(o) = r.outer_loss {
                    *e.1.get_or_insert(0.0) += o;
                }
                e.2 += 1;
                step_loss += r.outer_loss.unwrap_or(r.inner_loss);
            }
            meta_total += step_loss / chosen.len() as f64;
        }
        if !params.weights.all_finite() {
            return Err(TrainError::Data(format!("parameters diverged in epoch {epoch}")));
        }
        log.push(EpochRecord {
            version: LOG_VERSION,
            strategy: cfg.strategy,
            epoch,
            meta_loss: meta_total / steps.max(1) as f64,
            subjects: tasks
                .iter()
                .zip(&totals)
                .filter(|(_, e)| e.2 > 0)
                .map(|(t, e)| SubjectLoss {
                    subject_id: t.subject_id.clone(),
                    inner_loss: e.0 / e.2 as f64,
                    outer_loss: e.1.map(|o| o / e.2 as f64),
                })
                .collect(),
        });
    }
    Ok(TrainOutput { params, log })
}

fn has_both_classes(windows: &[Window]) -> bool {
    windows.iter().any(|w| w.label == 0) && windows.iter().any(|w| w.label == 1)
}

/// Minibatch training of one subject from `init` with the outer optimiser.
pub fn train_conventional_from(
    init: ModelParams,
    subject_id: &str,
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    if !has_both_classes(windows) {
        return Err(TrainError::SingleClass(subject_id.into()));
    }
    let task = SubjectTask {
        subject_id: subject_id.into(),
        task_id: windows[0].task_id,
        support: windows.to_vec(),
        query: Vec::new(),
        truth: None,
    };
    let cfg = TrainConfig {
        strategy: Strategy::Conventional,
        ..cfg.clone()
    };
    outer_loop(init, std::slice::from_ref(&task), &cfg)
}

/// Minibatch training of one subject from a seeded random initialisation.
pub fn train_conventional(
    model_cfg: &ModelConfig,
    subject_id: &str,
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let init = init_model(model_cfg, cfg.seed)?;
    train_conventional_from(init, subject_id, windows, cfg)
}

/// Pooled pretraining: per-subject gradients averaged each step.
///
/// Source subjects have no held-out part, so each subject's support and
/// query windows are pooled into one training set, matching the data MAML
/// sees across its two loops.
pub fn pretrain_transfer(init: ModelParams, tasks: &[SubjectTask], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::Data("transfer pretraining needs at least one task".into()));
    }
    let pooled: Vec<SubjectTask> = tasks
        .iter()
        .map(|t| SubjectTask {
            support: t.windows().cloned().collect(),
            query: Vec::new(),
            ..t.clone()
        })
        .collect();
    let cfg = TrainConfig {
        strategy: Strategy::Transfer,
        ..cfg.clone()
    };
    outer_loop(init, &pooled, &cfg)
}

/// Meta-training with MAML or its first-order approximation, per `cfg.strategy`.
pub fn meta_train(init: ModelParams, tasks: &[SubjectTask], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    if !matches!(cfg.strategy, Strategy::Maml | Strategy::Fomaml) {
        return Err(TrainError::Config(format!("meta_train needs maml or fomaml, got {}", cfg.strategy)));
    }
    if tasks.is_empty() {
        return Err(TrainError::Data("meta-training needs at least one task".into()));
    }
    outer_loop(init, tasks, cfg)
}

/// One support and one query minibatch of a task.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub subject_id: String,
    pub support: Batch,
    pub query: Batch,
}

/// Mean meta-gradient over a task batch (MAML or first-order, per strategy).
pub fn meta_gradient(params: &ModelParams, batch: &[TaskBatch], cfg: &TrainConfig) -> Result<(ParamVector, Vec<TaskGrad>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Data("empty task batch".into()));
    }
    let second_order = match cfg.strategy {
        Strategy::Maml => true,
        Strategy::Fomaml => false,
        s => return Err(TrainError::Config(format!("meta_gradient needs maml or fomaml, got {s}"))),
    };
    for b in batch {
        for (set, data) in [("support", &b.support), ("query", &b.query)] {
            if data.is_empty() {
                return Err(TrainError::EmptySet {
                    subject: b.subject_id.clone(),
                    set,
                });
            }
        }
    }
    let results = cfg
        .exec
        .map(batch, |b| adapted_query_grad(params, &b.support, &b.query, cfg, second_order))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let g = mean_params(&results.iter().map(|r| &r.grad).collect::<Vec<_>>())?;
    Ok((g, results))
}

/// One outer update: meta-gradient, then the optimiser step.
pub fn meta_step(
    params: &ModelParams,
    batch: &[TaskBatch],
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
) -> Result<ModelParams, TrainError> {
    let (g, _) = meta_gradient(params, batch, cfg)?;
    Ok(params.with_weights(optimizer.step(&params.weights, &g)?))
}

/// `n` plain gradient steps `θ ← θ - α g(k, θ)`.
pub fn sgd_path<G>(theta: &ParamVector, n: usize, lr: f64, mut grad: G) -> Result<ParamVector, TrainError>
where
    G: FnMut(usize, &ParamVector) -> Result<ParamVector, TrainError>,
{
    let mut p = theta.clone();
    for k in 0..n {
        let g = grad(k, &p)?;
        p = p.add_scaled(&g, -lr)?;
    }
    Ok(p)
}

/// `θ + β · mean_i(θ_i - θ)` over the inner-loop end points `θ_i`.
pub fn reptile_update(theta: &ParamVector, ends: &[ParamVector], beta: f64) -> Result<ParamVector, TrainError> {
    if ends.is_empty() {
        return Err(TrainError::Data("reptile needs at least one task".into()));
    }
    let deltas: Vec<ParamVector> = ends
        .iter()
        .map(|e| e.add_scaled(theta, -1.0))
        .collect::<Result<_, _>>()?;
    let mean = mean_params(&deltas.iter().collect::<Vec<_>>())?;
    Ok(theta.add_scaled(&mean, beta)?)
}

/// `n` plain gradient steps on the task's support minibatches. Unlike
/// [`reptile_step`] this accepts `n = 1`.
pub fn reptile_inner(params: &ModelParams, task: &SubjectTask, n: usize, epoch: usize, cfg: &TrainConfig) -> Result<ModelParams, TrainError> {
    if task.support.is_empty() {
        return Err(TrainError::EmptySet {
            subject: task.subject_id.clone(),
            set: "support",
        });
    }
    let plan = epoch_batches(cfg.seed, epoch, task.support.len(), cfg.minibatch);
    let end = sgd_path(&params.weights, n, cfg.inner_lr, |k, w| {
        let batch = Batch::training(&pick(&task.support, &plan[k % plan.len()]))?;
        Ok(loss_and_grad(&params.with_weights(w.clone()), &batch, cfg.objective)?.1)
    })?;
    Ok(params.with_weights(end))
}

/// `θ ← θ + β (θ⁽ⁿ⁾ - θ)`, averaged over tasks, with `β = outer_lr`.
pub fn reptile_step(params: &ModelParams, tasks: &[SubjectTask], epoch: usize, cfg: &TrainConfig) -> Result<ModelParams, TrainError> {
    if cfg.reptile_steps < 2 {
        return Err(TrainError::Config(format!(
            "reptile needs at least 2 inner steps, got {}",
            cfg.reptile_steps
        )));
    }
    let ends = cfg
        .exec
        .map(tasks, |t| reptile_inner(params, t, cfg.reptile_steps, epoch, cfg).map(|p| p.weights))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(params.with_weights(reptile_update(&params.weights, &ends, cfg.outer_lr)?))
}

/// Reptile meta-training, one step per epoch over the selected tasks.
pub fn reptile_train(init: ModelParams, tasks: &[SubjectTask], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    check_tasks(tasks, false)?;
    let mut params = init;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let chosen: Vec<SubjectTask> = select_tasks(tasks.len(), cfg, epoch, 0)
            .into_iter()
            .map(|i| tasks[i].clone())
            .collect();
        params = reptile_step(&params, &chosen, epoch, cfg)?;
        log.push(EpochRecord {
            version: LOG_VERSION,
            strategy: Strategy::Reptile,
            epoch,
            meta_loss: f64::NAN,
            subjects: Vec::new(),
        });
    }
    Ok(TrainOutput { params, log })
}

/// Initialisation for `strategy` from the source tasks.
pub fn pretrain(strategy: Strategy, model_cfg: &ModelConfig, sources: &[SubjectTask], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    let init = init_model(model_cfg, cfg.seed)?;
    let cfg = TrainConfig {
        strategy,
        ..cfg.clone()
    };
    match strategy {
        Strategy::Conventional => Ok(TrainOutput {
            params: init,
            log: Vec::new(),
        }),
        Strategy::Transfer => pretrain_transfer(init, sources, &cfg),
        Strategy::Maml | Strategy::Fomaml => meta_train(init, sources, &cfg),
        Strategy::Reptile => reptile_train(init, sources, &cfg),
    }
}

pub fn accuracy(params: &ModelParams, windows: &[Window]) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Ok(0.0);
    }
    let probs = params.predict_windows(windows, 256)?;
    let correct = probs
        .iter()
        .zip(windows)
        .filter(|(p, w)| argmax(p) == w.label)
        .count();
    Ok(correct as f64 / windows.len() as f64)
}

fn argmax(p: &[f64]) -> u8 {
    u8::from(p[1] > p[0])
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub params: ModelParams,
    /// Support accuracy before training (index 0) and after each epoch.
    pub support_accuracy: Vec<f64>,
    /// Mean minibatch loss of each epoch.
    pub losses: Vec<f64>,
    /// First epoch whose support accuracy reaches 90% of the final one.
    pub epochs_to_target: Option<usize>,
}

pub const TARGET_FRACTION: f64 = 0.9;

/// Plain gradient descent on the support set; the query set is never read.
pub fn finetune(params: &ModelParams, task: &SubjectTask, cfg: &TrainConfig) -> Result<FinetuneResult, TrainError> {
    cfg.validate()?;
    if !has_both_classes(&task.support) {
        return Err(TrainError::SingleClass(task.subject_id.clone()));
    }
    let lr = cfg.finetune_lr();
    let mut p = params.clone();
    let mut support_accuracy = vec![accuracy(&p, &task.support)?];
    let mut losses = Vec::with_capacity(cfg.finetune_epochs);
    let stream = seed::derive(cfg.seed, &[seed::tag("finetune")]);
    for epoch in 0..cfg.finetune_epochs {
        let plan = epoch_batches(stream, epoch, task.support.len(), cfg.minibatch);
        let mut total = 0.0;
        for idx in &plan {
            let batch = Batch::training(&pick(&task.support, idx))?;
            let (l, g) = loss_and_grad(&p, &batch, cfg.objective)?;
            total += l;
            p = p.with_weights(p.weights.add_scaled(&g, -lr)?);
        }
        if !p.weights.all_finite() {
            return Err(TrainError::Data(format!("fine-tuning diverged in epoch {epoch}")));
        }
        losses.push(total / plan.len() as f64);
        support_accuracy.push(accuracy(&p, &task.support)?);
    }
    let epochs_to_target = epochs_to_target(&support_accuracy);
    Ok(FinetuneResult {
        params: p,
        support_accuracy,
        losses,
        epochs_to_target,
    })
}

pub fn epochs_to_target(curve: &[f64]) -> Option<usize> {
    let last = *curve.last()?;
    curve.iter().position(|&a| a >= TARGET_FRACTION * last)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    /// Support-set accuracy of the evaluated model.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept(u8),
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub decision: Decision,
    pub confidence: f64,
    pub threshold: f64,
}

impl Prediction {
    pub fn new(probs: [f64; 2], threshold: f64) -> Self {
        let confidence = probs[0].max(probs[1]);
        let decision = if confidence > threshold {
            Decision::Accept(argmax(&probs))
        } else {
            Decision::Reject
        };
        Self {
            probs,
            decision,
            confidence,
            threshold,
        }
    }

    pub fn class(&self) -> u8 {
        argmax(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when nothing was accepted.
    pub accepted_accuracy: Option<f64>,
    pub acceptance_rate: f64,
    pub threshold: f64,
    pub n_windows: usize,
    pub loss_curve: Vec<f64>,
    pub epochs_to_target: Option<usize>,
}

pub fn predict(params: &ModelParams, windows: &[Window], threshold: f64) -> Result<Vec<Prediction>, TrainError> {
    Ok(params
        .predict_windows(windows, 256)?
        .into_iter()
        .map(|p| Prediction::new([p[0], p[1]], threshold))
        .collect())
}

/// Scores predictions against labels.
pub fn score(predictions: &[Prediction], labels: &[u8]) -> Metrics {
    let n = predictions.len();
    let correct = predictions.iter().zip(labels).filter(|(p, &l)| p.class() == l).count();
    let accepted: Vec<bool> = predictions
        .iter()
        .zip(labels)
        .filter_map(|(p, &l)| match p.decision {
            Decision::Accept(c) => Some(c == l),
            Decision::Reject => None,
        })
        .collect();
    Metrics {
        accuracy: correct as f64 / n.max(1) as f64,
        accepted_accuracy: (!accepted.is_empty())
            .then(|| accepted.iter().filter(|&&c| c).count() as f64 / accepted.len() as f64),
        acceptance_rate: accepted.len() as f64 / n.max(1) as f64,
        threshold: predictions.first().map_or(f64::NAN, |p| p.threshold),
        n_windows: n,
        loss_curve: Vec::new(),
        epochs_to_target: None,
    }
}

/// Predicts every query window with the given threshold and scores it.
pub fn evaluate(
    params: &ModelParams,
    support: &[Window],
    query: &[Window],
    threshold: Threshold,
) -> Result<(Metrics, Vec<Prediction>), TrainError> {
    if query.is_empty() {
        return Err(TrainError::Data("evaluation needs at least one query window".into()));
    }
    let th = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Auto => accuracy(params, support)?,
    };
    let preds = predict(params, query, th)?;
    let labels: Vec<u8> = query.iter().map(|w| w.label).collect();
    let mut m = score(&preds, &labels);
    m.threshold = th;
    Ok((m, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineStats {
    pub decisions: Vec<Decision>,
    pub acceptance_rate: f64,
    /// Stream duration divided by the number of accepted predictions.
    pub mean_accepted_interval_s: Option<f64>,
    /// Longest run without an accepted prediction, in seconds.
    pub longest_gap_s: f64,
}

/// Applies `threshold` to a time-ordered prediction stream with hop `hop_s`.
pub fn filter_online(stream: &[Prediction], threshold: f64, hop_s: f64) -> OnlineStats {
    let decisions: Vec<Decision> = stream
        .iter()
        .map(|p| Prediction::new(p.probs, threshold).decision)
        .collect();
    let accepted = decisions.iter().filter(|d| matches!(d, Decision::Accept(_))).count();
    let n = stream.len();
    let mut longest = 0usize;
    let mut run = 0usize;
    for d in &decisions {
        if matches!(d, Decision::Reject) {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    OnlineStats {
        acceptance_rate: accepted as f64 / n.max(1) as f64,
        mean_accepted_interval_s: (accepted > 0).then(|| n as f64 * hop_s / accepted as f64),
        longest_gap_s: longest as f64 * hop_s,
        decisions,
    }
}

/// Result of one strategy on one held-out subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub subject_id: String,
    pub strategy: Strategy,
    /// All query windows, argmax decision.
    pub accuracy: f64,
    /// With the automatic threshold.
    pub filtered: Metrics,
    pub epochs_to_target: Option<usize>,
    pub support_accuracy: f64,
}

/// What one fold produced, for callers that keep models or logs.
pub struct FoldArtifacts<'a> {
    pub fold: &'a FoldResult,
    pub target: &'a SubjectTask,
    pub init: &'a ModelParams,
    pub pretrain_log: &'a [EpochRecord],
    pub finetuned: &'a FinetuneResult,
}

/// Leave-one-subject-out: for each held-out subject, initialise with each
/// strategy from the remaining subjects, fine-tune on its support set and
/// evaluate on its query set.
pub fn leave_one_subject_out(
    tasks: &[SubjectTask],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    strategies: &[Strategy],
    held_out: Option<&[usize]>,
) -> Result<Vec<FoldResult>, TrainError> {
    leave_one_subject_out_with(tasks, model_cfg, cfg, strategies, held_out, |_| Ok::<(), TrainError>(()))
}

/// [`leave_one_subject_out`], handing every fold's artifacts to `sink` as
/// soon as the fold finishes.
pub fn leave_one_subject_out_with<E, F>(
    tasks: &[SubjectTask],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    strategies: &[Strategy],
    held_out: Option<&[usize]>,
    mut sink: F,
) -> Result<Vec<FoldResult>, E>
where
    E: From<TrainError>,
    F: FnMut(FoldArtifacts<'_>) -> Result<(), E>,
{
    if tasks.len() < 2 {
        return Err(TrainError::Data("leave-one-subject-out needs at least two subjects".into()).into());
    }
    let all: Vec<usize> = (0..tasks.len()).collect();
    let folds = held_out.unwrap_or(&all);
    if let Some(&bad) = folds.iter().find(|&&h| h >= tasks.len()) {
        return Err(TrainError::Data(format!("held-out index {bad} out of range for {} subjects", tasks.len())).into());
    }
    let mut out = Vec::new();
    for &h in folds {
        let target = tasks[h].as_evaluation();
        let sources: Vec<SubjectTask> = tasks
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != h)
            .map(|(_, t)| t.as_training())
            .collect();
        for &s in strategies {
            let pre = pretrain(s, model_cfg, &sources, cfg)?;
            let ft = finetune(&pre.params, &target, cfg)?;
            let (mut filtered, _) = evaluate(&ft.params, &target.support, &target.query, Threshold::Auto)?;
            filtered.loss_curve = ft.losses.clone();
            filtered.epochs_to_target = ft.epochs_to_target;
            let fold = FoldResult {
                subject_id: target.subject_id.clone(),
                strategy: s,
                accuracy: filtered.accuracy,
                epochs_to_target: ft.epochs_to_target,
                support_accuracy: *ft.support_accuracy.last().expect("non-empty curve"),
                filtered,
            };
            sink(FoldArtifacts {
                fold: &fold,
                target: &target,
                init: &pre.params,
                pretrain_log: &pre.log,
                finetuned: &ft,
            })?;
            out.push(fold);
        }
    }
    Ok(out)
}
