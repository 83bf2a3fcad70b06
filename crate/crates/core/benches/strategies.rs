use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metabci_core::exec::Exec;
use metabci_core::model::{init_model, ModelConfig};
use metabci_core::synth::{generate, SynthSpec};
use metabci_core::task::SubjectTask;
use metabci_core::train::{self, Batch, Strategy, TaskBatch, TrainConfig};
use metabci_signal::Window;

fn model() -> ModelConfig {
    ModelConfig {
        n_temporal_filters: 4,
        temporal_klen: 17,
        n_spatial_maps: 4,
        classifier_channels: 4,
        classifier_klen: 5,
        classifier_stride: 3,
        ..ModelConfig::default()
    }
}

fn tasks() -> Vec<SubjectTask> {
    let spec = SynthSpec {
        n_subjects: 4,
        trials_per_class: 12,
        support_per_class: 8,
        window_s: 0.5,
        ..SynthSpec::default()
    };
    generate(&spec).unwrap().iter().map(SubjectTask::as_training).collect()
}

fn meta_batch(tasks: &[SubjectTask]) -> Vec<TaskBatch> {
    tasks
        .iter()
        .map(|t| {
            let s: Vec<&Window> = t.support.iter().take(8).collect();
            let q: Vec<&Window> = t.query.iter().take(8).collect();
            TaskBatch {
                subject_id: t.subject_id.clone(),
                support: Batch::training(&s).unwrap(),
                query: Batch::training(&q).unwrap(),
            }
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let tasks = tasks();
    let batch = meta_batch(&tasks);
    let params = init_model(&model(), 0).unwrap();
    let mut group = c.benchmark_group("meta_gradient");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        for strategy in [Strategy::Maml, Strategy::Fomaml] {
            let cfg = TrainConfig {
                strategy,
                exec,
                inner_lr: 0.03,
                ..TrainConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), strategy), &cfg, |b, cfg| {
                b.iter(|| black_box(train::meta_gradient(&params, &batch, cfg).unwrap()))
            });
        }
    }
    group.finish();

    let mut group = c.benchmark_group("pretrain_epoch");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        for strategy in [Strategy::Transfer, Strategy::Maml, Strategy::Reptile] {
            let cfg = TrainConfig {
                strategy,
                exec,
                epochs: 1,
                inner_lr: 0.03,
                ..TrainConfig::default()
            };
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), strategy), &cfg, |b, cfg| {
                b.iter(|| black_box(train::pretrain(strategy, &model(), &tasks, cfg).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
