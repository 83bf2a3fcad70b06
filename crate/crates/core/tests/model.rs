use metabci_autodiff::{Tape, Tensor};
use metabci_core::model::{self, init_model, softmax, ModelConfig, ModelError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_channels: 3,
        n_temporal_filters: 2,
        temporal_klen: 5,
        temporal_stride: 2,
        n_spatial_maps: 2,
        classifier_channels: 2,
        classifier_klen: 3,
        classifier_stride: 2,
        ..ModelConfig::default()
    }
}

fn random_window(c: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![c, t], (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

/// Straight-line forward pass, written from the layer definitions.
fn naive_forward(cfg: &ModelConfig, w: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<f64> {
    let (f, k, s) = (cfg.n_temporal_filters, cfg.temporal_klen, cfg.temporal_stride);
    let (m, cc, ck, cs, o) = (
        cfg.n_spatial_maps,
        cfg.classifier_channels,
        cfg.classifier_klen,
        cfg.classifier_stride,
        cfg.n_outputs,
    );
    let ch = cfg.n_channels;
    let t = x[0].len();
    let t1 = (t - k) / s + 1;
    // h1[c][f][t]
    let mut h1 = vec![vec![vec![0.0; t1]; f]; ch];
    for c in 0..ch {
        for fi in 0..f {
            for tt in 0..t1 {
                for j in 0..k {
                    h1[c][fi][tt] += w[0][fi * k + j] * x[c][tt * s + j];
                }
            }
        }
    }
    let mut h2 = vec![vec![0.0; t1]; m];
    for mi in 0..m {
        for tt in 0..t1 {
            let mut acc = w[2][mi];
            for fi in 0..f {
                for c in 0..ch {
                    acc += w[1][(mi * f + fi) * ch + c] * h1[c][fi][tt];
                }
            }
            h2[mi][tt] = elu(acc);
        }
    }
    let t2 = (t1 - ck) / cs + 1;
    let mut h3 = vec![vec![0.0; t2]; cc];
    for a in 0..cc {
        for tt in 0..t2 {
            let mut acc = w[4][a];
            for mi in 0..m {
                for j in 0..ck {
                    acc += w[3][(a * m + mi) * ck + j] * h2[mi][tt * cs + j];
                }
            }
            h3[a][tt] = elu(acc);
        }
    }
    let t3 = (t2 - ck) / cs + 1;
    (0..o)
        .map(|oi| {
            let mut total = 0.0;
            for tt in 0..t3 {
                let mut acc = w[6][oi];
                for a in 0..cc {
                    for j in 0..ck {
                        acc += w[5][(oi * cc + a) * ck + j] * h3[a][tt * cs + j];
                    }
                }
                total += acc;
            }
            total / t3 as f64
        })
        .collect()
}

#[test]
fn forward_matches_loop_oracle() {
    for (seed, outputs, t) in [(1, 2, 40), (2, 3, 57), (3, 2, 23)] {
        let cfg = ModelConfig { n_outputs: outputs, ..tiny() };
        let mut params = init_model(&cfg, seed).unwrap();
        // Non-zero biases so they are exercised too.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let flat: Vec<f64> = params.weights.flatten().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        params.weights = params.weights.unflatten(&flat).unwrap();
        let x = random_window(cfg.n_channels, t, seed);
        let rows: Vec<Vec<f64>> = x.data().chunks(t).map(<[f64]>::to_vec).collect();
        let w: Vec<Vec<f64>> = params.weights.iter().map(|(_, t)| t.data().to_vec()).collect();
        let want = naive_forward(&cfg, &w, &rows);
        let got = params.forward(&x).unwrap();
        assert_eq!(got.data().len(), outputs);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn init_variance_follows_fan_in() {
    let cfg = ModelConfig::default();
    let layout = cfg.layout();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); layout.len()];
    for seed in 0..1000 {
        let p = init_model(&cfg, seed).unwrap();
        for (i, (_, t)) in p.weights.iter().enumerate() {
            // One sample per draw keeps the draws independent.
            let v = t.data()[(seed as usize * 7) % t.len()];
            sums[i].0 += v;
            sums[i].1 += v * v;
            sums[i].2 += 1;
        }
    }
    for ((name, shape), (s, s2, n)) in layout.iter().zip(&sums) {
        if shape.len() != 3 {
            assert_eq!(*s2, 0.0, "{name} bias should start at zero");
            continue;
        }
        let fan_in = (shape[1] * shape[2]) as f64;
        let n = *n as f64;
        let var = s2 / n - (s / n).powi(2);
        let want = 2.0 / fan_in;
        assert!((var / want - 1.0).abs() < 0.2, "{name}: variance {var}, expected {want}");
    }
}

#[test]
fn seeds_control_init() {
    let cfg = tiny();
    assert_eq!(init_model(&cfg, 4).unwrap(), init_model(&cfg, 4).unwrap());
    assert_ne!(init_model(&cfg, 4).unwrap().weights, init_model(&cfg, 5).unwrap().weights);
}

#[test]
fn lengths_320_and_480_give_two_logits() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 0).unwrap();
    for t in [320, 480] {
        assert_eq!(p.forward(&random_window(17, t, 1)).unwrap().data().len(), 2);
    }
}

#[test]
fn too_short_input_names_minimum() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 0).unwrap();
    let min = cfg.min_input_len();
    match p.forward(&random_window(17, min - 1, 1)) {
        Err(ModelError::InputTooShort { min: m, got }) => {
            assert_eq!((m, got), (min, min - 1));
        }
        other => panic!("expected InputTooShort, got {other:?}"),
    }
    assert!(p.forward(&random_window(17, min, 1)).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn any_admissible_length_is_accepted(extra in 0usize..=200, seed in 0u64..1000) {
        let cfg = ModelConfig {
            n_temporal_filters: 4,
            n_spatial_maps: 4,
            classifier_channels: 4,
            ..ModelConfig::default()
        };
        let p = init_model(&cfg, seed).unwrap();
        let out = p.forward(&random_window(17, cfg.min_input_len() + extra, seed)).unwrap();
        prop_assert_eq!(out.data().len(), cfg.n_outputs);
        prop_assert!(out.all_finite());
    }

    #[test]
    fn probabilities_are_normalised_and_ordered(seed in 0u64..1000) {
        let cfg = tiny();
        let p = init_model(&cfg, seed).unwrap();
        let x = random_window(3, 30, seed);
        let z = p.forward(&x).unwrap();
        let pr = p.predict_proba(&x).unwrap();
        prop_assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(z.data()[1] > z.data()[0], pr[1] > pr[0]);
    }
}

#[test]
fn zero_logits_give_even_odds() {
    assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
}

/// Shifting the crop of a stationary tone by one temporal stride barely
/// moves the pooled logits. Only eight output steps are averaged at this
/// length, so the bound is on the median over initialisations.
#[test]
fn crop_shift_changes_logits_little() {
    let cfg = ModelConfig::default();
    let t = cfg.min_input_len() + 64;
    let n = t + cfg.temporal_stride;
    let fs = 160.0;
    let long: Vec<f64> = (0..17 * n)
        .map(|i| {
            let (c, k) = (i / n, (i % n) as f64 / fs);
            2f64.sqrt() * (2.0 * std::f64::consts::PI * 11.0 * k + c as f64).sin()
        })
        .collect();
    let crop = |start: usize| {
        let data: Vec<f64> = long.chunks(n).flat_map(|row| row[start..start + t].to_vec()).collect();
        Tensor::new(vec![17, t], data).unwrap()
    };
    let mut worst: Vec<f64> = (0..20)
        .map(|seed| {
            let p = init_model(&cfg, seed).unwrap();
            let a = p.forward(&crop(0)).unwrap();
            let b = p.forward(&crop(cfg.temporal_stride)).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .collect();
    worst.sort_by(f64::total_cmp);
    assert!(worst[10] < 0.1, "median change {}", worst[10]);
    assert!(worst[19] < 0.25, "largest change {}", worst[19]);
}

#[test]
fn every_parameter_gets_gradient() {
    let cfg = ModelConfig::default();
    let p = init_model(&cfg, 11).unwrap();
    let xs: Vec<Tensor> = (0..8).map(|i| random_window(17, 200, i)).collect();
    let refs: Vec<&Tensor> = xs.iter().collect();
    let tape = Tape::new();
    let theta = tape.leaves(&p.weights);
    let x = tape.constant(model::stack(&refs, 200));
    let z = model::logits(&cfg, &theta, x).unwrap();
    let loss = metabci_autodiff::ops::cross_entropy_batch(z, &[0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
    let grads = tape.grad(loss, &theta, false).unwrap();
    for ((name, _), g) in p.weights.iter().zip(&grads) {
        let g = g.value();
        let zeros = g.data().iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros, 0, "{name}: {zeros} of {} gradient entries are zero", g.len());
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = tiny();
    let p = init_model(&cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    p.save(std::fs::File::create(&path).unwrap()).unwrap();
    let q = model::ModelParams::load(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(p, q);
}
