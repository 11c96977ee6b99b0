//! Polyphase rational resampling with a Kaiser-windowed sinc anti-alias filter.

use std::f64::consts::PI;

const KAISER_BETA: f64 = 5.0;
/// Filter half length in units of the larger of the two rate factors.
const HALF_LEN_FACTOR: usize = 10;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced up/down factors for `from → to`. Rates are snapped to 1 mHz.
pub fn rate_ratio(from_hz: f64, to_hz: f64) -> (usize, usize) {
    let f = (from_hz * 1000.0).round() as u64;
    let t = (to_hz * 1000.0).round() as u64;
    let g = gcd(f, t).max(1);
    ((t / g) as usize, (f / g) as usize)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// Low-pass prototype for interpolation by `up` and decimation by `down`,
/// cut at the lower of the two Nyquist limits, DC gain `up`.
pub fn design_filter(up: usize, down: usize) -> Vec<f64> {
    let max_rate = up.max(down);
    let half = HALF_LEN_FACTOR * max_rate;
    let n = 2 * half + 1;
    let cutoff = 1.0 / max_rate as f64; // fraction of the upsampled Nyquist
    let i0b = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - half as f64;
            let sinc = if t == 0.0 { 1.0 } else { (PI * cutoff * t).sin() / (PI * cutoff * t) };
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            cutoff * sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / s);
    h
}

/// Resample `x` from `from_hz` to `to_hz`; output length is `round(len · to / from)`.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Vec<f64> {
    let (up, down) = rate_ratio(from_hz, to_hz);
    if up == down {
        return x.to_vec();
    }
    let out_len = (x.len() as f64 * to_hz / from_hz).round() as usize;
    let h = design_filter(up, down);
    let half = (h.len() - 1) / 2;
    let mut y = Vec::with_capacity(out_len);
    for n in 0..out_len {
        // position in the upsampled stream, centred on the filter
        let t = n * down + half;
        // input samples j contribute through tap t - j·up; walk the matching polyphase branch
        let j_max = (t / up).min(x.len().saturating_sub(1));
        let j_min = t.saturating_sub(h.len() - 1).div_ceil(up);
        let mut acc = 0.0;
        let mut j = j_min;
        while j <= j_max {
            acc += h[t - j * up] * x[j];
            j += 1;
        }
        y.push(acc);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_reduces() {
        assert_eq!(rate_ratio(500.0, 256.0), (64, 125));
        assert_eq!(rate_ratio(250.0, 256.0), (128, 125));
        assert_eq!(rate_ratio(256.0, 256.0), (1, 1));
    }

    #[test]
    fn identity_rate_is_exact() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        assert_eq!(resample(&x, 256.0, 256.0), x);
    }

    #[test]
    fn output_length() {
        assert_eq!(resample(&vec![0.0; 5000], 500.0, 256.0).len(), 2560);
        assert_eq!(resample(&vec![0.0; 1000], 125.0, 256.0).len(), 2048);
    }

    #[test]
    fn dc_passes_with_unit_gain() {
        let y = resample(&vec![1.0; 4000], 500.0, 256.0);
        for v in &y[200..1800] {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }
}
