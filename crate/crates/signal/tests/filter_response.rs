use std::f64::consts::PI;

use metabci_signal::filter::{bandpass, Bandpass};
use metabci_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

const FS: f64 = 160.0;
const N: usize = 3200;

fn sine(freq: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / FS).sin()).collect()
}

/// Amplitude of the `freq` component from the FFT bin (integer cycles only).
fn fft_amplitude(x: &[f64], freq: f64) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let bin = (freq * x.len() as f64 / FS).round() as usize;
    2.0 * buf[bin].norm() / x.len() as f64
}

fn filtered(x: &[f64]) -> Vec<f64> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap();
    bandpass(&t, 8.0, 45.0, FS).unwrap().into_data()
}

#[test]
fn passband_sine_keeps_amplitude() {
    let gain = fft_amplitude(&filtered(&sine(10.0, N)), 10.0);
    assert!((0.95..=1.05).contains(&gain), "10 Hz gain {gain}");
    let mid = fft_amplitude(&filtered(&sine(20.0, N)), 20.0);
    assert!((mid - 1.0).abs() < 1e-3, "20 Hz gain {mid}");
}

#[test]
fn stopband_sines_are_removed() {
    for f in [1.0, 60.0] {
        let a = fft_amplitude(&filtered(&sine(f, N)), f);
        assert!(a < 0.1, "{f} Hz residual {a}");
    }
}

#[test]
fn dc_offset_is_removed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for base in [sine(12.0, N), (0..N).map(|_| rng.gen_range(-1.0..1.0)).collect()] {
        let x: Vec<f64> = base.iter().map(|v| v + 5.0).collect();
        let y = filtered(&x);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }
}

fn xcorr_peak(a: &[f64], b: &[f64], max_lag: i64) -> i64 {
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

#[test]
fn zero_phase_lag() {
    let x = sine(11.0, N);
    // Half a period of an 11 Hz sine at 160 Hz is about 7 samples.
    assert_eq!(xcorr_peak(&x, &filtered(&x), 7), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<f64> = (0..N).map(|_| rng.gen_range(-1.0..1.0)).collect();
    assert_eq!(xcorr_peak(&filtered(&noise), &noise, 40), 0);
}

#[test]
fn filtfilt_response_is_squared_magnitude() {
    let f = Bandpass::design(8.0, 45.0, FS, 6).unwrap();
    for freq in [5.0, 9.0, 30.0, 50.0] {
        let a = fft_amplitude(&f.filtfilt(&sine(freq, N)), freq);
        let expect = f.magnitude(freq).powi(2);
        assert!((a - expect).abs() < 0.01, "{freq} Hz: {a} vs {expect}");
    }
}

#[test]
fn filtering_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..N).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let a = filtered(&x);
    let b = filtered(&x);
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}
