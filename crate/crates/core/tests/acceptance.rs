//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs without the test harness so the lines always print; the
//! process fails if any gating criterion fails.
//!
//! Optional inputs:
//! - `METABCI_EDF_FILE`: a real recording for the reference-reader check.
//! - `METABCI_PHYSIONET_ROOT`: the motor imagery corpus for the full run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use metabci_autodiff::ops::{
    conv_spatial_batch, conv_temporal_batch, cross_entropy_batch, gambler_loss_batch, mean_over_time,
};
use metabci_autodiff::{DiffError, ParamVector, Tape, Tensor, Var};
use metabci_core::benchmark::{self, BenchConfig, BenchReport};
use metabci_core::exec::Exec;
use metabci_core::model::{init_model, ModelConfig, ModelParams};
use metabci_core::probe::{profile, svd};
use metabci_core::synth::{generate, SynthSpec};
use metabci_core::task::{self, SubjectTask};
use metabci_core::train::{
    self, adapted_gradient, adapted_query_grad, loss_and_grad, meta_gradient, Batch, Objective, OuterOptimizer,
    Strategy, TaskBatch, TrainConfig, TrainError,
};
use metabci_signal::edf::{EdfBuilder, EdfFile};
use metabci_signal::filter::bandpass;
use metabci_signal::Window;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 100;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);

const CLOSED_FORM_TOL: f64 = 1e-10;
const MAML_FD_TOL: f64 = 1e-4;
const MAML_FD_MAX_PARAMS: usize = 500;
const MAML_BUDGET: Duration = Duration::from_secs(120);

const DEGENERATE_GRAD_TOL: f64 = 1e-12;
const DEGENERATE_TRAIN_TOL: f64 = 1e-12;

const ORDER_MARGIN: f64 = 0.03;
const FILTER_GAIN_MARGIN: f64 = 0.05;
const ACCEPT_RATE: (f64, f64) = (0.1, 0.6);
const SPEEDUP_RATIO: f64 = 0.5;
const BENCH_BUDGET: Duration = Duration::from_secs(15 * 60);

const FUZZ_INPUTS: usize = 100_000;

const FS: f64 = 160.0;
const PASS_GAIN: (f64, f64) = (0.95, 1.05);
const STOP_RESIDUAL: f64 = 0.1;

const SVD_TOL: f64 = 1e-10;
const PROBE_SEEDS: u64 = 10;
const PROBE_MIN_HITS: usize = 8;

type Outcome = Result<String, String>;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    fn check(&mut self, id: &'static str, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("PASS [{id}] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                println!("FAIL [{id}] {name}: {d} ({secs:.1}s)");
                self.failed.push(id);
            }
        }
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- gradients

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, DiffError>;

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    build(&tape, &vars).unwrap().item().unwrap()
}

/// Norm-wise relative error of the tape gradient against central differences.
fn fd_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars).unwrap();
    let grads = tape.grad(out, &vars, false).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        let analytic = g.value();
        let mut diff = 0.0;
        let mut num_norm = 0.0;
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let n = (eval(build, &plus) - eval(build, &minus)) / (2.0 * FD_STEP);
            diff += (analytic.data()[e] - n).powi(2);
            num_norm += n * n;
        }
        let scale = analytic.norm().max(num_norm.sqrt()).max(1e-8);
        worst = worst.max(diff.sqrt() / scale);
    }
    worst
}

fn contract<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let r = random_tensor(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(tape.constant(r))?.sum_all())
}

type Case = fn(u64) -> (Box<Build>, Vec<Tensor>);

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("elementwise", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, &[3, 4], -2.0, 2.0);
            let b = random_tensor(&mut rng, &[3, 4], 0.5, 2.0);
            let build: Box<Build> = Box::new(move |tape, v| {
                let y = v[0]
                    .mul(v[1])?
                    .add(v[0].elu())?
                    .sub(v[1].ln().scale(0.7))?
                    .add(v[1].recip())?
                    .add(v[0].scale(0.3).exp().neg())?
                    .add(v[0].square())?;
                contract(tape, y, seed)
            });
            (build, vec![a, b])
        }),
        ("conv1d", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stride = 1 + (seed % 3) as usize;
            let k = 1 + (seed % 4) as usize;
            let x = random_tensor(&mut rng, &[2, 3, 11], -1.0, 1.0);
            let w = random_tensor(&mut rng, &[2, 3, k], -1.0, 1.0);
            let build: Box<Build> = Box::new(move |tape, v| contract(tape, v[0].conv1d(v[1], stride)?, seed));
            (build, vec![x, w])
        }),
        ("temporal/spatial conv, bias, time mean", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 3, 12], -1.0, 1.0);
            let kernels = random_tensor(&mut rng, &[2, 1, 4], -1.0, 1.0);
            let spatial = random_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
            let bias = random_tensor(&mut rng, &[2], -0.5, 0.5);
            let build: Box<Build> = Box::new(move |tape, v| {
                let t = conv_temporal_batch(v[0], v[1], 1 + (seed % 2) as usize)?;
                let s = conv_spatial_batch(t, v[2])?.add_channel_bias(v[3])?.elu();
                contract(tape, mean_over_time(s)?, seed)
            });
            (build, vec![x, kernels, spatial, bias])
        }),
        ("cross-entropy", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random_tensor(&mut rng, &[4, 3], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let build: Box<Build> = Box::new(move |_, v| cross_entropy_batch(v[0], &labels));
            (build, vec![logits])
        }),
        ("gambler's loss", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random_tensor(&mut rng, &[4, 3], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
            let payoff = rng.gen_range(1.05..2.0);
            let build: Box<Build> = Box::new(move |_, v| gambler_loss_batch(v[0], &labels, payoff));
            (build, vec![logits])
        }),
        ("permute/reshape/gather/sum/expand/log-softmax", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let build: Box<Build> = Box::new(move |tape, v| {
                let p = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
                let g = p.gather(&[5, 0, 1, 1, 2, 3, 4, 4])?;
                let y = g.sum_last().expand_last(3).square().log_softmax()?;
                contract(tape, y, seed)
            });
            (build, vec![x])
        }),
        ("gradient of gradient norm", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[2, 2, 10], -1.0, 1.0);
            let kernels = random_tensor(&mut rng, &[2, 1, 3], -1.0, 1.0);
            let spatial = random_tensor(&mut rng, &[2, 2, 2], -1.0, 1.0);
            let head = random_tensor(&mut rng, &[2, 2, 3], -1.0, 1.0);
            let build: Box<Build> = Box::new(move |tape, v| {
                let x = tape.constant(x.clone());
                let t = conv_temporal_batch(x, v[0], 1)?;
                let s = conv_spatial_batch(t, v[1])?.elu();
                let logits = mean_over_time(s.conv1d(v[2], 2)?)?;
                let loss = cross_entropy_batch(logits, &[0, 1])?;
                let grads = tape.grad(loss, v, true)?;
                let mut total = grads[0].square().sum_all();
                for g in &grads[1..] {
                    total = total.add(g.square().sum_all())?;
                }
                Ok(total)
            });
            (build, vec![kernels, spatial, head])
        }),
    ]
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0, "", 0);
    for (name, case) in op_cases() {
        for seed in 0..FD_SEEDS {
            let (build, inputs) = case(seed);
            let e = fd_error(build.as_ref(), &inputs);
            if e > worst.0 || e.is_nan() {
                worst = (e, name, seed);
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(
        worst.0 < FD_REL_TOL && elapsed < GRADIENT_BUDGET,
        format!(
            "{} op groups x {FD_SEEDS} seeds, worst rel err {:.2e} ({} seed {}) < {FD_REL_TOL:e}, {:.1}s < {}s",
            op_cases().len(),
            worst.0,
            worst.1,
            worst.2,
            elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs()
        ),
    )
}

// -------------------------------------------------------------- meta-gradient

fn scalar(v: f64) -> ParamVector {
    ParamVector::new(vec![("theta".into(), Tensor::vector(vec![v]))]).unwrap()
}

/// `½ (θ - c)²`.
fn quadratic(c: f64) -> impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, TrainError> {
    move |p| {
        let tape = p[0].tape();
        let d = p[0].sub(tape.constant(Tensor::vector(vec![c])))?;
        Ok(d.square().sum_all().scale(0.5))
    }
}

fn small_corpus(n: usize, trials: usize, seed: u64) -> Vec<SubjectTask> {
    generate(&SynthSpec {
        n_subjects: n,
        trials_per_class: trials,
        support_per_class: trials / 2,
        window_s: 0.5,
        class_sep: 2.0,
        noise_std: 0.3,
        subject_shift: 0.3,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn batch(windows: &[Window]) -> Batch {
    Batch::training(&windows.iter().collect::<Vec<_>>()).unwrap()
}

fn criterion_meta_gradient() -> Outcome {
    let t = Instant::now();
    // Quadratic family: n inner steps take θ - c to (1-α)^n (θ - c), so the
    // meta-gradient is (1-α)^(2n) (θ - c), averaged over the family.
    let family = [-1.5, 0.25, 2.0, 3.5];
    let mut closed_err: f64 = 0.0;
    for (theta, alpha) in [(0.3, 0.1), (-2.0, 0.45), (1.0, 0.9), (4.0, 0.05)] {
        for steps in [1usize, 2, 3] {
            let mut got = 0.0;
            let mut want = 0.0;
            for &c in &family {
                let a = adapted_gradient(&scalar(theta), quadratic(c), quadratic(c), alpha, steps, true)
                    .map_err(|e| e.to_string())?;
                got += a.grad.flatten()[0] / family.len() as f64;
                want += (1.0 - alpha).powi(2 * steps as i32) * (theta - c) / family.len() as f64;
            }
            closed_err = closed_err.max((got - want).abs());
        }
    }

    let mcfg = ModelConfig {
        n_temporal_filters: 2,
        temporal_klen: 7,
        n_spatial_maps: 2,
        classifier_channels: 3,
        classifier_klen: 3,
        classifier_stride: 2,
        ..ModelConfig::default()
    };
    let n_params = mcfg.n_params();
    let task = small_corpus(1, 8, 8).remove(0).as_training();
    let support = batch(&task.support[..6]);
    let query = batch(&task.query[..6]);
    let p = init_model(&mcfg, 4).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        inner_lr: 0.3,
        exec: Exec::Sequential,
        ..TrainConfig::default()
    };
    let maml = adapted_query_grad(&p, &support, &query, &cfg, true).map_err(|e| e.to_string())?.grad.flatten();
    let adapted_loss = |flat: &[f64]| {
        let q = p.with_weights(p.weights.unflatten(flat).unwrap());
        let (_, g) = loss_and_grad(&q, &support, Objective::CrossEntropy).unwrap();
        let phi = q.with_weights(q.weights.add_scaled(&g, -cfg.inner_lr).unwrap());
        train::batch_loss(&phi, &query, Objective::CrossEntropy).unwrap()
    };
    let theta = p.weights.flatten();
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += FD_STEP;
            b[i] -= FD_STEP;
            (adapted_loss(&a) - adapted_loss(&b)) / (2.0 * FD_STEP)
        })
        .collect();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let rel = norm(&mut maml.iter().zip(&fd).map(|(a, b)| a - b)) / norm(&mut fd.iter().copied());
    let elapsed = t.elapsed();
    ensure(
        closed_err < CLOSED_FORM_TOL && rel < MAML_FD_TOL && n_params <= MAML_FD_MAX_PARAMS && elapsed < MAML_BUDGET,
        format!(
            "quadratic family max err {closed_err:.1e} < {CLOSED_FORM_TOL:e}; {n_params}-param decoder rel err {rel:.2e} < {MAML_FD_TOL:e}; {:.1}s < {}s",
            elapsed.as_secs_f64(),
            MAML_BUDGET.as_secs()
        ),
    )
}

// ------------------------------------------------------------- degeneracies

fn max_diff(a: &ParamVector, b: &ParamVector) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

fn degenerate_model() -> ModelConfig {
    ModelConfig {
        n_temporal_filters: 2,
        temporal_klen: 9,
        n_spatial_maps: 2,
        classifier_channels: 2,
        classifier_klen: 3,
        classifier_stride: 3,
        ..ModelConfig::default()
    }
}

fn degenerate_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        minibatch: 8,
        inner_lr: 0.05,
        outer_lr: 0.01,
        exec: Exec::Sequential,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn criterion_degenerate() -> Outcome {
    // Part 1: α = 0 meta-gradients against the pooled (transfer) gradient.
    let tasks: Vec<SubjectTask> = small_corpus(3, 8, 7).into_iter().map(|t| t.as_training()).collect();
    let p = init_model(&degenerate_model(), 3).map_err(|e| e.to_string())?;
    let tb: Vec<TaskBatch> = tasks
        .iter()
        .map(|t| TaskBatch {
            subject_id: t.subject_id.clone(),
            support: batch(&t.support[..6]),
            query: batch(&t.query[..6]),
        })
        .collect();
    let mut pooled = p.weights.zeros_like();
    for b in &tb {
        let (_, g) = loss_and_grad(&p, &b.query, Objective::CrossEntropy).map_err(|e| e.to_string())?;
        pooled = pooled.add_scaled(&g, 1.0 / tb.len() as f64).unwrap();
    }
    let mut grad_err: f64 = 0.0;
    let mut meta = Vec::new();
    for strategy in [Strategy::Maml, Strategy::Fomaml] {
        let cfg = TrainConfig {
            strategy,
            inner_lr: 0.0,
            ..degenerate_train()
        };
        let (g, _) = meta_gradient(&p, &tb, &cfg).map_err(|e| e.to_string())?;
        grad_err = grad_err.max(max_diff(&g, &pooled));
        meta.push(g);
    }
    grad_err = grad_err.max(max_diff(&meta[0], &meta[1]));

    // Part 2: one task, zero inner steps, against conventional training.
    let t = small_corpus(1, 12, 3).remove(0).as_training();
    let task = SubjectTask {
        query: t.support.clone(),
        ..t
    };
    let mcfg = degenerate_model();
    let init = || init_model(&mcfg, degenerate_train().seed).unwrap();
    let reference = train::train_conventional(&mcfg, &task.subject_id, &task.support, &degenerate_train())
        .map_err(|e| e.to_string())?;
    let mut train_err: f64 = 0.0;
    let no_query = SubjectTask {
        query: Vec::new(),
        ..task.clone()
    };
    let transfer = train::pretrain_transfer(init(), std::slice::from_ref(&no_query), &degenerate_train())
        .map_err(|e| e.to_string())?;
    train_err = train_err.max(max_diff(&transfer.params.weights, &reference.params.weights));
    for strategy in [Strategy::Maml, Strategy::Fomaml] {
        let cfg = TrainConfig {
            strategy,
            inner_steps: 0,
            ..degenerate_train()
        };
        let out = train::meta_train(init(), std::slice::from_ref(&task), &cfg).map_err(|e| e.to_string())?;
        train_err = train_err.max(max_diff(&out.params.weights, &reference.params.weights));
    }
    // Reptile has no zero-step form (it would never move). Its degenerate
    // case is one task with β = 1 and one epoch of inner steps, which is
    // plain SGD at the inner rate.
    let per_epoch = task.support.len().div_ceil(degenerate_train().minibatch);
    let sgd = TrainConfig {
        optimizer: OuterOptimizer::Sgd,
        outer_lr: degenerate_train().inner_lr,
        ..degenerate_train()
    };
    let sgd_ref =
        train::train_conventional(&mcfg, &task.subject_id, &task.support, &sgd).map_err(|e| e.to_string())?;
    let reptile = TrainConfig {
        strategy: Strategy::Reptile,
        reptile_steps: per_epoch,
        outer_lr: 1.0,
        ..degenerate_train()
    };
    let r = train::reptile_train(init(), std::slice::from_ref(&no_query), &reptile).map_err(|e| e.to_string())?;
    let reptile_err = max_diff(&r.params.weights, &sgd_ref.params.weights);
    ensure(
        grad_err <= DEGENERATE_GRAD_TOL && train_err <= DEGENERATE_TRAIN_TOL && reptile_err <= DEGENERATE_TRAIN_TOL,
        format!(
            "alpha=0 maml/fomaml/pooled max diff {grad_err:.1e} <= {DEGENERATE_GRAD_TOL:e}; zero-step transfer/maml/fomaml vs conventional {train_err:.1e}, reptile (beta=1) vs sgd {reptile_err:.1e} <= {DEGENERATE_TRAIN_TOL:e}"
        ),
    )
}

// ---------------------------------------------------------------- benchmark

/// Desk-scale benchmark: small decoder, half-second windows, two held-out
/// subjects per seed.
fn bench_config() -> BenchConfig {
    BenchConfig {
        synth: SynthSpec {
            n_subjects: 12,
            support_per_class: 10,
            subject_shift: 0.5,
            window_s: 0.5,
            ..SynthSpec::default()
        },
        model: ModelConfig {
            n_temporal_filters: 4,
            temporal_klen: 17,
            n_spatial_maps: 4,
            classifier_channels: 4,
            classifier_klen: 5,
            classifier_stride: 3,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 100,
            meta_batch_size: 4,
            finetune_epochs: 3,
            inner_lr: 0.03,
            outer_lr: 0.003,
            ..TrainConfig::default()
        },
        strategies: vec![Strategy::Conventional, Strategy::Transfer, Strategy::Maml],
        seeds: (0..10).collect(),
        folds_per_seed: 2,
        convergence_epochs: 30,
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn criterion_ordering(r: &BenchReport, elapsed: Duration) -> Outcome {
    let acc = |s| r.strategy(s).map(|x| x.median_accuracy).ok_or(format!("{s} missing"));
    let (m, t, c) = (acc(Strategy::Maml)?, acc(Strategy::Transfer)?, acc(Strategy::Conventional)?);
    ensure(
        m - t >= ORDER_MARGIN && m - c >= ORDER_MARGIN && elapsed < BENCH_BUDGET,
        format!(
            "median over {} seeds: maml {} vs transfer {} (+{:.1}) vs random init {} (+{:.1}), margin {:.0} points; {:.0}s < {}s",
            r.seeds.len() / r.summary.len().max(1),
            pct(m),
            pct(t),
            100.0 * (m - t),
            pct(c),
            100.0 * (m - c),
            100.0 * ORDER_MARGIN,
            elapsed.as_secs_f64(),
            BENCH_BUDGET.as_secs()
        ),
    )
}

fn criterion_filtering(r: &BenchReport) -> Outcome {
    let m = r.strategy(Strategy::Maml).ok_or("maml missing")?;
    let accepted = m.median_accepted_accuracy.ok_or("no windows accepted")?;
    let rate = m.median_acceptance_rate;
    ensure(
        accepted >= m.median_accuracy + FILTER_GAIN_MARGIN && (ACCEPT_RATE.0..=ACCEPT_RATE.1).contains(&rate),
        format!(
            "maml accepted {} vs all {} (gap {:.1} >= {:.0} points), acceptance rate {:.3} in [{}, {}]",
            pct(accepted),
            pct(m.median_accuracy),
            100.0 * (accepted - m.median_accuracy),
            100.0 * FILTER_GAIN_MARGIN,
            rate,
            ACCEPT_RATE.0,
            ACCEPT_RATE.1
        ),
    )
}

fn criterion_convergence(r: &BenchReport) -> Outcome {
    let e = |s| {
        r.strategy(s)
            .and_then(|x| x.median_epochs_to_target)
            .ok_or(format!("{s}: no epochs to target"))
    };
    let (m, c) = (e(Strategy::Maml)?, e(Strategy::Conventional)?);
    ensure(
        c > 0.0 && m <= SPEEDUP_RATIO * c,
        format!("median epochs to target: maml {m:.2} vs random init {c:.2} (ratio {:.2} <= {SPEEDUP_RATIO})", m / c),
    )
}

// --------------------------------------------------------------------- EDF

fn fixture(seed: u64, labels: usize, spr: usize, records: usize, duration: f64, notes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = EdfBuilder::new(duration, spr);
    for c in 0..labels {
        let v: Vec<i16> = (0..spr * records).map(|_| rng.gen()).collect();
        let lo = -(100.0 + c as f64);
        b = b.digital_signal(&format!("Ch{c}."), (lo, -lo), (-32768, 32767), v);
    }
    for i in 0..notes {
        b = b.annotation(i as f64 * duration, duration / 2.0, ["T0", "T1", "T2"][i % 3]);
    }
    b.build().unwrap().to_bytes()
}

fn criterion_edf() -> Outcome {
    let fixtures = [
        fixture(1, 3, 16, 4, 0.1, 3),
        fixture(2, 1, 160, 2, 1.0, 0),
        fixture(3, 17, 8, 5, 0.05, 5),
        fixture(4, 64, 160, 1, 1.0, 2),
    ];
    for (i, bytes) in fixtures.iter().enumerate() {
        let parsed = EdfFile::parse(bytes).map_err(|e| format!("fixture {i}: {e}"))?;
        if &parsed.to_bytes() != bytes {
            return Err(format!("fixture {i} does not round-trip"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let digits = b"0123456789 -.+e";
    let mut panics = 0;
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for n in 0..FUZZ_INPUTS {
        let bytes: Vec<u8> = if n % 2 == 0 {
            (0..rng.gen_range(0..1200)).map(|_| rng.gen()).collect()
        } else {
            let mut b = fixtures[n % fixtures.len()].clone();
            for _ in 0..rng.gen_range(1..6) {
                let i = rng.gen_range(0..b.len());
                b[i] = if i < 256 * 4 && rng.gen_bool(0.7) {
                    digits[rng.gen_range(0..digits.len())]
                } else {
                    rng.gen()
                };
            }
            if rng.gen_bool(0.2) {
                b.truncate(rng.gen_range(0..b.len()));
            }
            b
        };
        if catch_unwind(|| EdfFile::parse(&bytes)).is_err() {
            panics += 1;
        }
    }
    std::panic::set_hook(quiet);

    let real = match std::env::var_os("METABCI_EDF_FILE") {
        None => "reference-reader check skipped (METABCI_EDF_FILE unset)".to_string(),
        Some(p) => check_real_file(Path::new(&p))?,
    };
    ensure(
        panics == 0,
        format!("{} fixtures round-trip bit-exactly; {FUZZ_INPUTS} fuzz inputs, {panics} panics; {real}", fixtures.len()),
    )
}

/// Header fields and annotation onsets read directly from the bytes, as a
/// reference independent of the parser.
struct Reference {
    channels: usize,
    rates: Vec<f64>,
    onsets: Vec<f64>,
}

fn ascii(b: &[u8]) -> String {
    String::from_utf8_lossy(b).trim().to_string()
}

fn reference_read(b: &[u8]) -> Result<Reference, String> {
    let num = |r: std::ops::Range<usize>| -> Result<f64, String> {
        ascii(b.get(r.clone()).ok_or("short header")?).parse::<f64>().map_err(|e| format!("{r:?}: {e}"))
    };
    let ns = num(252..256)? as usize;
    let records = num(236..244)? as usize;
    let duration = num(244..252)?;
    let field = |offset: usize, width: usize, i: usize| 256 + offset * ns + width * i;
    let labels: Vec<String> = (0..ns).map(|i| ascii(&b[field(0, 16, i)..field(0, 16, i) + 16])).collect();
    let spr: Vec<usize> = (0..ns)
        .map(|i| {
            let at = field(16 + 80 + 8 * 5 + 80, 8, i);
            num(at..at + 8).map(|v| v as usize)
        })
        .collect::<Result<_, _>>()?;
    let header = 256 * (ns + 1);
    let record_len: usize = spr.iter().sum::<usize>() * 2;
    let mut onsets = Vec::new();
    let mut rates = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if l == "EDF Annotations" {
            let before: usize = spr[..i].iter().sum::<usize>() * 2;
            for r in 0..records {
                let s = header + r * record_len + before;
                let tal = b.get(s..s + spr[i] * 2).ok_or("short data")?;
                // Each TAL starts with a signed onset and ends with 0x14 0x00;
                // the first TAL of a record is the record timestamp.
                for (k, chunk) in tal.split(|&c| c == 0).filter(|c| !c.is_empty()).enumerate() {
                    let head = chunk.split(|&c| c == 0x14 || c == 0x15).next().unwrap_or(&[]);
                    let texts = chunk.split(|&c| c == 0x14).nth(1).unwrap_or(&[]);
                    if k == 0 && texts.is_empty() {
                        continue;
                    }
                    if let Ok(v) = ascii(head).parse::<f64>() {
                        onsets.push(v);
                    }
                }
            }
        } else {
            rates.push(spr[i] as f64 / duration);
        }
    }
    Ok(Reference {
        channels: rates.len(),
        rates,
        onsets,
    })
}

fn check_real_file(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let reference = reference_read(&bytes)?;
    let rec = metabci_signal::recording::parse_edf(&bytes, "S", "R").map_err(|e| e.to_string())?;
    let onsets: Vec<f64> = rec.annotations.iter().map(|a| a.onset).collect();
    let same_onsets = onsets.len() == reference.onsets.len()
        && onsets.iter().zip(&reference.onsets).all(|(a, b)| (a - b).abs() < 1e-9);
    let rate_ok = reference.rates.iter().all(|&r| (r - rec.sample_rate).abs() < 1e-9);
    if rec.n_channels() != reference.channels || !rate_ok || !same_onsets {
        return Err(format!(
            "{}: parser {} channels at {} Hz, {} onsets; reference {} channels at {:?} Hz, {} onsets",
            path.display(),
            rec.n_channels(),
            rec.sample_rate,
            onsets.len(),
            reference.channels,
            reference.rates.first(),
            reference.onsets.len()
        ));
    }
    Ok(format!(
        "{}: {} channels, {} Hz, {} annotation onsets match the reference reader",
        path.display(),
        reference.channels,
        rec.sample_rate,
        onsets.len()
    ))
}

// ------------------------------------------------------------------ filter

fn sine(freq: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / FS).sin()).collect()
}

fn amplitude(x: &[f64], freq: f64) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let bin = (freq * x.len() as f64 / FS).round() as usize;
    2.0 * buf[bin].norm() / x.len() as f64
}

fn lag_of_peak(a: &[f64], b: &[f64], max_lag: i64) -> i64 {
    let n = a.len() as i64;
    (-max_lag..=max_lag)
        .map(|lag| {
            let s: f64 = (0..n)
                .filter(|&i| (0..n).contains(&(i + lag)))
                .map(|i| a[i as usize] * b[(i + lag) as usize])
                .sum();
            (lag, s)
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap()
        .0
}

fn criterion_filter() -> Outcome {
    let n = 3200;
    let filt = |x: &[f64]| -> Result<Vec<f64>, String> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec()).map_err(|e| e.to_string())?;
        Ok(bandpass(&t, 8.0, 45.0, FS).map_err(|e| e.to_string())?.into_data())
    };
    let gain = amplitude(&filt(&sine(10.0, n))?, 10.0);
    let low = amplitude(&filt(&sine(1.0, n))?, 1.0);
    let high = amplitude(&filt(&sine(60.0, n))?, 60.0);
    let x = sine(11.0, n);
    let lag = lag_of_peak(&x, &filt(&x)?, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noise_lag = lag_of_peak(&filt(&noise)?, &noise, 40);
    ensure(
        (PASS_GAIN.0..=PASS_GAIN.1).contains(&gain) && low < STOP_RESIDUAL && high < STOP_RESIDUAL && lag == 0 && noise_lag == 0,
        format!(
            "10 Hz gain {gain:.4} in [{}, {}]; residual 1 Hz {low:.2e}, 60 Hz {high:.2e} < {STOP_RESIDUAL}; lag {lag} (sine), {noise_lag} (noise) samples",
            PASS_GAIN.0, PASS_GAIN.1
        ),
    )
}

// ------------------------------------------------------------------- probe

fn svd_error(a: &DMatrix<f64>) -> Result<f64, String> {
    let d = svd(a).map_err(|e| e.to_string())?;
    Ok((d.reconstruct() - a).abs().max())
}

fn probe_model() -> ModelConfig {
    ModelConfig {
        n_temporal_filters: 4,
        temporal_klen: 33,
        n_spatial_maps: 4,
        classifier_channels: 4,
        classifier_klen: 5,
        classifier_stride: 3,
        ..ModelConfig::default()
    }
}

fn rhythm_model(seed: u64) -> Result<ModelParams, String> {
    let spec = SynthSpec {
        n_subjects: 1,
        trials_per_class: 200,
        support_per_class: 10,
        window_s: 0.5,
        class_sep: 2.0,
        rhythm_hz: 11.0,
        seed,
        ..SynthSpec::default()
    };
    let t = generate(&spec).map_err(|e| e.to_string())?.remove(0);
    let w: Vec<Window> = t.windows().cloned().collect();
    let cfg = TrainConfig {
        epochs: 40,
        outer_lr: 0.01,
        seed,
        ..TrainConfig::default()
    };
    Ok(train::train_conventional(&probe_model(), &t.subject_id, &w, &cfg).map_err(|e| e.to_string())?.params)
}

fn criterion_probe() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut recon: f64 = 0.0;
    for (r, c) in [(32, 33), (4, 33), (33, 4), (16, 16), (1, 9)] {
        let a = DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        recon = recon.max(svd_error(&a)?);
    }
    let mut peaks = Vec::new();
    for seed in 0..PROBE_SEEDS {
        let m = rhythm_model(seed)?;
        let k = m.temporal_kernels();
        recon = recon.max(svd_error(&DMatrix::from_row_slice(k.shape()[0], k.shape()[1], k.data()))?);
        peaks.push(profile(&m, FS).map_err(|e| e.to_string())?.spectrum);
    }
    let hits = peaks.iter().filter(|s| s.peak_in_alpha).count();
    let list: Vec<String> = peaks.iter().map(|s| format!("{:.1}", s.peak_hz)).collect();
    ensure(
        recon < SVD_TOL && hits >= PROBE_MIN_HITS,
        format!(
            "svd reconstruction max err {recon:.1e} < {SVD_TOL:e}; dominant-filter peak in [8, 13] Hz for {hits}/{PROBE_SEEDS} seeds (need {PROBE_MIN_HITS}): {} Hz",
            list.join(" ")
        ),
    )
}

// --------------------------------------------------------- full data (opt.)

fn full_corpus_run(root: &Path) -> Outcome {
    use metabci_signal::dataset::{ingest, IngestConfig};
    use metabci_signal::window::ChannelStats;
    use metabci_signal::TaskId;
    let report = ingest(root, &IngestConfig::default()).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for t in [TaskId::Task2, TaskId::Task4] {
        let windows: Vec<Window> = report.subjects.iter().flat_map(|s| s.windows.get(&t).cloned().unwrap_or_default()).collect();
        let mut tasks = Vec::new();
        for (id, ws) in task::group_by_subject(windows) {
            let Ok(mut st) = task::split_by_session(&id, t, ws, &[1]) else { continue };
            let Ok(stats) = ChannelStats::fit(&st.support) else { continue };
            for w in st.support.iter_mut().chain(st.query.iter_mut()) {
                stats.apply(w).map_err(|e| e.to_string())?;
            }
            tasks.push(st);
        }
        let folds = train::leave_one_subject_out(
            &tasks,
            &ModelConfig::default(),
            &TrainConfig::default(),
            &[Strategy::Transfer, Strategy::Maml],
            None,
        )
        .map_err(|e| e.to_string())?;
        let mean = |s| {
            let f: Vec<f64> = folds.iter().filter(|f| f.strategy == s).map(|f| f.accuracy).collect();
            f.iter().sum::<f64>() / f.len().max(1) as f64
        };
        let (tr, ma) = (mean(Strategy::Transfer), mean(Strategy::Maml));
        ok &= ma >= tr;
        lines.push(format!("{t}: maml {} vs transfer {}", pct(ma), pct(tr)));
    }
    ensure(ok, lines.join("; "))
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    suite.check("1", "gradient correctness", criterion_gradients);
    suite.check("2", "second-order meta-gradient", criterion_meta_gradient);
    suite.check("3", "degenerate-strategy equivalence", criterion_degenerate);

    let t = Instant::now();
    let bench = catch_unwind(|| benchmark::run(&bench_config()));
    let elapsed = t.elapsed();
    match bench {
        Ok(Ok(report)) => {
            suite.check("4", "synthetic few-shot ordering", || criterion_ordering(&report, elapsed));
            suite.check("5", "rejection filtering", || criterion_filtering(&report));
            suite.check("6", "convergence speed", || criterion_convergence(&report));
        }
        failure => {
            let why = match failure {
                Ok(Err(e)) => e.to_string(),
                _ => "benchmark panicked".into(),
            };
            for (id, name) in [("4", "synthetic few-shot ordering"), ("5", "rejection filtering"), ("6", "convergence speed")] {
                suite.check(id, name, || Err(why.clone()));
            }
        }
    }

    suite.check("7", "EDF conformance", criterion_edf);
    suite.check("8", "filter response", criterion_filter);
    suite.check("9", "probe", criterion_probe);
    match std::env::var_os("METABCI_PHYSIONET_ROOT") {
        None => println!("SKIP [10] full corpus run (optional): METABCI_PHYSIONET_ROOT unset"),
        Some(root) => {
            // Not gating: reported, never counted as a failure.
            let mut optional = Suite { failed: Vec::new() };
            optional.check("10", "full corpus run (optional)", || full_corpus_run(Path::new(&root)));
        }
    }

    if suite.failed.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: failed criteria {}", suite.failed.join(", "));
        std::process::exit(1);
    }
}
