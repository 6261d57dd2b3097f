//! Centered unitary discrete Fourier transforms.
//!
//! The continuous convention is F(q) = (2*pi)^(-1/2) * integral f(x) exp(-i q x) dx,
//! discretized on the centered grids of [`crate::grid`]: forward multiplies the DFT
//! by dx / sqrt(2*pi), inverse by dq / sqrt(2*pi), which makes the pair exactly
//! unitary (sum |f|^2 dx is preserved to roundoff). For even n the centered DFT is
//! plain fftshift -> FFT -> fftshift, no residual phase.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((n, forward))
            .or_insert_with(|| {
                planner.plan_fft(
                    n,
                    if forward { FftDirection::Forward } else { FftDirection::Inverse },
                )
            })
            .clone()
    })
}

/// Half-window rotation; for even n, fftshift and ifftshift coincide.
pub fn fftshift(buf: &mut [Complex64]) {
    let n = buf.len();
    debug_assert!(n % 2 == 0);
    buf.rotate_left(n / 2);
}

/// In-place centered DFT without measure scaling: X[j] = sum_i x_i exp(-i q_j x_i * sign).
pub fn centered_dft(buf: &mut [Complex64], forward: bool) {
    fftshift(buf);
    plan(buf.len(), forward).process(buf);
    fftshift(buf);
}

/// Unitary forward transform (position -> angular): scales by dx / sqrt(2*pi).
pub fn unitary_forward(buf: &mut [Complex64], dx: f64) {
    centered_dft(buf, true);
    let s = dx / (2.0 * std::f64::consts::PI).sqrt();
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// Unitary inverse transform (angular -> position): scales by dq / sqrt(2*pi).
pub fn unitary_inverse(buf: &mut [Complex64], dq: f64) {
    centered_dft(buf, false);
    let s = dq / (2.0 * std::f64::consts::PI).sqrt();
    for v in buf.iter_mut() {
        *v *= s;
    }
}

/// Band-limited resampling of a periodic record: evaluates the trigonometric
/// interpolant of `values` (samples on a centered grid) at fractional index
/// positions `at` (in units of the input sample spacing, origin at index n/2).
/// Exact for signals band-limited to the input Nyquist range.
pub fn sinc_interp(values: &[Complex64], at: &[f64]) -> Vec<Complex64> {
    let n = values.len();
    let mut spec = values.to_vec();
    centered_dft(&mut spec, true);
    // evaluate sum_j spec[j] exp(+i 2*pi a_j t / n) / n at t = at[k]
    let inv_n = 1.0 / n as f64;
    at.iter()
        .map(|&t| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, s) in spec.iter().enumerate() {
                let a = j as f64 - (n / 2) as f64;
                // the Nyquist bin is split evenly between +n/2 and -n/2
                let w = if j == 0 { 0.5 } else { 1.0 };
                let ph = 2.0 * std::f64::consts::PI * a * t * inv_n;
                let e = Complex64::new(ph.cos(), ph.sin());
                acc += w * s * e;
                if j == 0 {
                    let ph2 = -ph;
                    acc += w * s * Complex64::new(ph2.cos(), ph2.sin());
                }
            }
            acc * inv_n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn unitary_roundtrip_preserves_samples() {
        let n = 64;
        let dx = 0.37;
        let dq = 2.0 * std::f64::consts::PI / (n as f64 * dx);
        let mut buf: Vec<Complex64> =
            (0..n).map(|i| c((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos())).collect();
        let orig = buf.clone();
        unitary_forward(&mut buf, dx);
        unitary_inverse(&mut buf, dq);
        for (a, b) in buf.iter().zip(orig.iter()) {
            assert!((a - b).norm() < 1e-12, "roundtrip error {}", (a - b).norm());
        }
    }

    #[test]
    fn parseval_holds_exactly() {
        let n = 128;
        let dx = 1.3e-5;
        let dq = 2.0 * std::f64::consts::PI / (n as f64 * dx);
        let mut buf: Vec<Complex64> =
            (0..n).map(|i| c((i as f64).sin(), (3.0 + i as f64).cos() * 0.2)).collect();
        let p_in: f64 = buf.iter().map(|v| v.norm_sqr()).sum::<f64>() * dx;
        unitary_forward(&mut buf, dx);
        let p_out: f64 = buf.iter().map(|v| v.norm_sqr()).sum::<f64>() * dq;
        assert!(
            (p_in - p_out).abs() < 1e-12 * p_in,
            "power {p_in} -> {p_out} not preserved"
        );
    }

    #[test]
    fn dc_component_lands_at_center() {
        let n = 16;
        let mut buf = vec![c(1.0, 0.0); n];
        centered_dft(&mut buf, true);
        for (j, v) in buf.iter().enumerate() {
            if j == n / 2 {
                assert!((v.re - n as f64).abs() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12, "leakage at bin {j}: {v}");
            }
        }
    }

    #[test]
    fn sinc_interp_recovers_band_limited_cosine_between_samples() {
        let n = 64usize;
        // band-limited: a few harmonics well below Nyquist
        let f = |t: f64| {
            c(
                (2.0 * std::f64::consts::PI * 3.0 * t / n as f64).cos()
                    + 0.5 * (2.0 * std::f64::consts::PI * 7.0 * t / n as f64).sin(),
                0.0,
            )
        };
        let values: Vec<Complex64> = (0..n).map(|i| f(i as f64 - (n / 2) as f64)).collect();
        let at: Vec<f64> = vec![-10.5, -3.25, 0.5, 7.75, 20.25];
        let out = sinc_interp(&values, &at);
        for (&t, v) in at.iter().zip(out.iter()) {
            let want = f(t);
            assert!(
                (v - want).norm() < 1e-10,
                "interp at {t}: got {v}, want {want}"
            );
        }
    }
}
