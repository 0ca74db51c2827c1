//! Real FFT helpers backed by `rustfft`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Half spectrum (`L / 2 + 1` bins) of a real sequence.
pub fn rfft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

/// Inverse of [`rfft`] for a length-`n` real sequence (normalized by `1/n`).
pub fn irfft(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    assert_eq!(spectrum.len(), n / 2 + 1, "half spectrum length for n = {n}");
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    full[..spectrum.len()].copy_from_slice(spectrum);
    for k in spectrum.len()..n {
        full[k] = spectrum[n - k].conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut full);
    let inv = 1.0 / n as f64;
    full.iter().map(|c| c.re * inv).collect()
}

/// Circular cross-correlation `r(tau) = sum_t x[t] * y[(t + tau) mod n]`
/// for every lag, computed as `irfft(conj(X) * Y)`.
pub fn circular_cross_correlation(x: &[f64], y: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), y.len(), "cross-correlation lengths");
    let (fx, fy) = (rfft(x), rfft(y));
    let prod: Vec<Complex64> = fx.iter().zip(&fy).map(|(a, b)| a.conj() * b).collect();
    irfft(&prod, x.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_has_flat_spectrum() {
        let s = rfft(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.len(), 3);
        for c in s {
            assert!((c.re - 1.0).abs() < 1e-15 && c.im.abs() < 1e-15);
        }
    }

    #[test]
    fn constant_is_dc_only() {
        let s = rfft(&[1.0; 4]);
        assert!((s[0].re - 4.0).abs() < 1e-15);
        assert!(s[1].norm() < 1e-15 && s[2].norm() < 1e-15);
    }

    #[test]
    fn single_sample_round_trip() {
        assert_eq!(irfft(&rfft(&[3.5]), 1), vec![3.5]);
    }
}
