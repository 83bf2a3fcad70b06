use metabci_core::probe::{dominant_filter, fft_len, freq_response, full_magnitudes, spectrum_text, svd};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn rank_one_recovers_vector() {
    let u = [0.3, -1.2, 2.0, 0.5];
    let raw = [1.0, -2.0, 0.5, 3.0, -0.7];
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let v: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let w: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    let d = dominant_filter(&w, 4, 5).unwrap();
    let sign = d.vector[3].signum();
    for (a, b) in d.vector.iter().zip(&v) {
        assert!((a - sign * b).abs() < 1e-10);
    }
    assert!(d.vector[3] > 0.0, "largest entry is positive");
    assert!(d.singular_values[1] < 1e-10);
    assert!(!d.degenerate);
}

#[test]
fn identity_is_degenerate() {
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let d = dominant_filter(&eye, 3, 3).unwrap();
    for s in &d.singular_values {
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(d.degenerate);
}

#[test]
fn random_svd_against_eigen_oracle() {
    for seed in 0..3 {
        let a = random_matrix(32, 33, seed);
        let d = svd(&a).unwrap();
        assert!((d.reconstruct() - &a).abs().max() < 1e-10);
        let r = d.singular_values.len();
        let eye = DMatrix::<f64>::identity(r, r);
        assert!((d.u.transpose() * &d.u - &eye).abs().max() < 1e-10);
        assert!((d.v.transpose() * &d.v - &eye).abs().max() < 1e-10);
        assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.singular_values.iter().all(|s| *s >= 0.0));

        let ata = a.transpose() * &a;
        let rows: Vec<Vec<f64>> = (0..33).map(|i| (0..33).map(|j| ata[(i, j)]).collect()).collect();
        let ev = jacobi_eigenvalues(rows);
        assert!(ev[32].abs() < 1e-9, "AᵀA of a 32×33 matrix is singular");
        for (s, l) in d.singular_values.iter().zip(&ev) {
            assert!((s * s - l).abs() < 1e-9 * ev[0], "{} vs {l}", s * s);
        }
    }
}

#[test]
fn ten_hertz_tone_peaks_at_ten() {
    let fs = 160.0;
    let x: Vec<f64> = (0..33).map(|n| (2.0 * std::f64::consts::PI * 10.0 * n as f64 / fs).sin()).collect();
    let s = freq_response(&x, fs).unwrap();
    assert_eq!(s.n_fft, 256);
    assert!((s.peak_hz - 10.0).abs() <= 0.7, "{}", s.peak_hz);
    assert!(s.peak_in_alpha);
    let (lo, hi) = (s.bins[0].0, s.bins.last().unwrap().0);
    assert_eq!((lo, hi), (0.0, fs / 2.0));
}

#[test]
fn constant_peaks_at_dc() {
    let s = freq_response(&[0.5; 20], 160.0).unwrap();
    assert_eq!(s.peak_hz, 0.0);
    assert!(!s.peak_in_alpha);
}

#[test]
fn parseval_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [4, 33, 300] {
        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mags = full_magnitudes(&x);
        assert_eq!(mags.len(), fft_len(k));
        let lhs: f64 = mags.iter().map(|m| m * m).sum();
        let rhs = k as f64 * x.iter().map(|v| v * v).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-9 * rhs.max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn spectrum_text_has_two_columns() {
    let s = freq_response(&[1.0, 0.0, -1.0, 0.0, 1.0, 0.0], 160.0).unwrap();
    let text = spectrum_text(&s);
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), s.bins.len());
    assert!(rows.iter().all(|r| r.split('\t').count() == 2));
}
