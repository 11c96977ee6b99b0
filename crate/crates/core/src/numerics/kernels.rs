//! Forward kernels shared by the graph ops and by code paths that do not need gradients.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// `c[m×n] = op(a) · op(b)` for one batch slice, where `op` optionally transposes.
///
/// `a` is stored `[m×k]` (or `[k×m]` when `ta`), `b` is `[k×n]` (or `[n×k]` when `tb`).
/// The contraction runs sequentially over `k` for every output cell.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool, c: &mut [f64]) {
    let a_rows: std::borrow::Cow<[f64]> = if ta {
        let mut t = vec![0.0; m * k];
        for p in 0..k {
            for i in 0..m {
                t[i * k + p] = a[p * m + i];
            }
        }
        t.into()
    } else {
        a.into()
    };
    let b_rows: std::borrow::Cow<[f64]> = if tb {
        let mut t = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                t[p * n + j] = b[j * k + p];
            }
        }
        t.into()
    } else {
        b.into()
    };
    c.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a_rows[i * k + p];
            let brow = &b_rows[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

pub fn check_fft_len(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::UnsupportedLength(n));
    }
    Ok(())
}

/// Unnormalised half spectrum `X_k = Σ x_n e^{-2πikn/N}`, `k = 0..=N/2`.
pub fn rfft(x: &[f64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    check_fft_len(n)?;
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan(n, false).process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// Magnitudes of [`rfft`].
pub fn rfft_mag(x: &[f64]) -> Result<Vec<f64>> {
    Ok(rfft(x)?.into_iter().map(|c| c.norm()).collect())
}

/// Gradient of `Σ_k g_k |X_k|` with respect to the time samples.
///
/// `d|X_k|/dx_n = Re(X_k e^{+2πikn/N}) / |X_k|`; bins with zero magnitude contribute nothing.
pub fn rfft_mag_backward(x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let spec = rfft(x)?;
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    for (k, (xk, g)) in spec.iter().zip(upstream).enumerate() {
        let mag = xk.norm();
        if mag > 0.0 {
            full[k] = xk * (g / mag);
        }
    }
    plan(n, true).process(&mut full);
    Ok(full.into_iter().map(|c| c.re).collect())
}

/// Rotate consecutive pairs `(x_{2i}, x_{2i+1})` by `angle_i = position · base^{-2i/dim}`.
///
/// `sign = -1.0` applies the inverse rotation.
pub fn rope_rotate_row(row: &mut [f64], position: f64, base: f64, sign: f64) {
    let dim = row.len();
    for i in 0..dim / 2 {
        let theta = base.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (sign * position * theta).sin_cos();
        let (a, b) = (row[2 * i], row[2 * i + 1]);
        row[2 * i] = a * c - b * s;
        row[2 * i + 1] = a * s + b * c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_cases() {
        let mut c = vec![0.0; 2];
        gemm(&[1., 2., 3., 4.], &[5., 6.], 2, 2, 1, false, false, &mut c);
        assert_eq!(c, vec![17.0, 39.0]);
        // transposed variants agree with explicit transposes
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let at = [1., 4., 2., 5., 3., 6.]; // 3x2
        let b = [1., 0., 2., 1., 0., 3.]; // 3x2
        let bt = [1., 2., 0., 0., 1., 3.]; // 2x3
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        gemm(&a, &b, 2, 3, 2, false, false, &mut c1);
        gemm(&at, &bt, 2, 3, 2, true, true, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn fft_rejects_odd_lengths() {
        assert_eq!(rfft_mag(&[0.0; 30]), Err(Error::UnsupportedLength(30)));
        assert!(rfft_mag(&[0.0; 32]).is_ok());
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
