//! Spectral view of the temporal filters.
//!
//! The `[F, K]` first-layer kernel matrix is decomposed; its top right
//! singular vector is the dominant temporal filter shape, and its magnitude
//! spectrum shows which rhythm the model tuned to.

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;

/// Minimum transform length; at 160 Hz this gives 0.625 Hz bins.
pub const MIN_FFT_LEN: usize = 256;
pub const ALPHA_BAND_HZ: (f64, f64) = (8.0, 13.0);
/// Relative gap below which the top two singular values count as tied.
pub const DEGENERATE_REL_GAP: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("weight matrix is empty")]
    Empty,
    #[error("weight matrix contains non-finite values")]
    NonFinite,
    #[error("series of length {0} is too short; need at least 4")]
    TooShort(usize),
    #[error("sampling rate must be positive, got {0}")]
    Rate(f64),
}

#[derive(Debug, Clone)]
pub struct Svd {
    /// `[F, r]`, `r = min(F, K)`.
    pub u: DMatrix<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// `[K, r]`; column `i` pairs with `singular_values[i]`.
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.singular_values));
        &self.u * s * self.v.transpose()
    }
}

/// Thin SVD with singular values sorted in descending order.
pub fn svd(a: &DMatrix<f64>) -> Result<Svd, ProbeError> {
    if a.is_empty() {
        return Err(ProbeError::Empty);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite);
    }
    let d = a.clone().svd(true, true);
    let u = d.u.expect("requested");
    let vt = d.v_t.expect("requested");
    let mut order: Vec<usize> = (0..d.singular_values.len()).collect();
    order.sort_by(|&i, &j| d.singular_values[j].total_cmp(&d.singular_values[i]));
    Ok(Svd {
        u: DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]),
        singular_values: order.iter().map(|&i| d.singular_values[i]).collect(),
        v: DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominantFilter {
    pub singular_values: Vec<f64>,
    /// Unit norm, largest-magnitude entry positive.
    pub vector: Vec<f64>,
    /// The top two singular values tie, so the vector is not unique.
    pub degenerate: bool,
}

/// Dominant right singular vector of a `[F, K]` row-major kernel matrix.
pub fn dominant_filter(weights: &[f64], f: usize, k: usize) -> Result<DominantFilter, ProbeError> {
    if f == 0 || k == 0 || weights.len() != f * k {
        return Err(ProbeError::Empty);
    }
    let a = DMatrix::from_row_slice(f, k, weights);
    let d = svd(&a)?;
    let mut v: Vec<f64> = d.v.column(0).iter().copied().collect();
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let s = &d.singular_values;
    let degenerate = s.len() > 1 && (s[0] - s[1]) <= DEGENERATE_REL_GAP * s[0].max(f64::MIN_POSITIVE);
    Ok(DominantFilter {
        singular_values: d.singular_values,
        vector: v,
        degenerate,
    })
}

/// Dominant filter of a model's temporal layer.
pub fn model_dominant_filter(params: &ModelParams) -> Result<DominantFilter, ProbeError> {
    let k = params.temporal_kernels();
    let s = k.shape();
    dominant_filter(k.data(), s[0], s[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// `(Hz, magnitude)` from DC to Nyquist.
    pub bins: Vec<(f64, f64)>,
    pub n_fft: usize,
    pub peak_hz: f64,
    pub peak_in_alpha: bool,
}

/// Transform length: the next power of two at or above `max(256, k)`.
pub fn fft_len(k: usize) -> usize {
    k.max(MIN_FFT_LEN).next_power_of_two()
}

/// Zero-padded magnitude spectrum of `x` sampled at `fs`.
///
/// Magnitudes are `|X_j| * sqrt(K / N)` for the length-`N` transform of the
/// length-`K` series, so that the squared magnitudes over all `N` bins sum to
/// `K * ||x||^2`. Only bins up to Nyquist are returned. The peak is the
/// largest of these, DC included.
pub fn freq_response(x: &[f64], fs: f64) -> Result<Spectrum, ProbeError> {
    if x.len() < 4 {
        return Err(ProbeError::TooShort(x.len()));
    }
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(ProbeError::Rate(fs));
    }
    let mags = full_magnitudes(x);
    let n = mags.len();
    let bins: Vec<(f64, f64)> = (0..=n / 2).map(|j| (j as f64 * fs / n as f64, mags[j])).collect();
    let peak = bins
        .iter()
        .fold((0.0, f64::NEG_INFINITY), |best, &(hz, m)| if m > best.1 { (hz, m) } else { best });
    Ok(Spectrum {
        n_fft: n,
        peak_hz: peak.0,
        peak_in_alpha: (ALPHA_BAND_HZ.0..=ALPHA_BAND_HZ.1).contains(&peak.0),
        bins,
    })
}

/// Scaled magnitudes of every transform bin.
pub fn full_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = fft_len(x.len());
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = (x.len() as f64 / n as f64).sqrt();
    buf.iter().map(|c| c.norm() * scale).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub filter: DominantFilter,
    pub spectrum: Spectrum,
}

pub fn profile(params: &ModelParams, fs: f64) -> Result<SpectralProfile, ProbeError> {
    let filter = model_dominant_filter(params)?;
    let spectrum = freq_response(&filter.vector, fs)?;
    Ok(SpectralProfile { filter, spectrum })
}

/// Two-column `Hz magnitude` text, one bin per line.
pub fn spectrum_text(s: &Spectrum) -> String {
    let mut out = String::from("# hz\tmagnitude\n");
    for (hz, m) in &s.bins {
        out.push_str(&format!("{hz:.4}\t{m:.9e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention() {
        let d = dominant_filter(&[0.0, -3.0, 1.0, 0.0, -6.0, 2.0], 2, 3).unwrap();
        let big = d.vector.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(big > 0.0);
        assert!((d.vector.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(dominant_filter(&[1.0, f64::NAN], 1, 2).unwrap_err(), ProbeError::NonFinite);
        assert_eq!(dominant_filter(&[], 0, 0).unwrap_err(), ProbeError::Empty);
        assert_eq!(freq_response(&[1.0; 3], 160.0).unwrap_err(), ProbeError::TooShort(3));
    }

    #[test]
    fn transform_length() {
        assert_eq!(fft_len(33), 256);
        assert_eq!(fft_len(300), 512);
    }
}
