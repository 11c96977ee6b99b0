//! Butterworth band-pass and second-order notch design, applied forward–backward.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// One biquad `b0 + b1 z⁻¹ + b2 z⁻² / 1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Complex response at normalised angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + z1 * self.b[1] + z2 * self.b[2]) / (self.a[0] + z1 * self.a[1] + z2 * self.a[2])
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// Cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn response(&self, w: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(w)).product()
    }

    /// Causal filtering with transposed direct form II, starting from `state`.
    fn filter(&self, x: &[f64], mut state: Vec<[f64; 2]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (sec, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2] = sec.b;
            let [_, a1, a2] = sec.a;
            for v in y.iter_mut() {
                let xin = *v;
                let out = b0 * xin + z[0];
                z[0] = b1 * xin - a1 * out + z[1];
                z[1] = b2 * xin - a2 * out;
                *v = out;
            }
        }
        y
    }

    /// Initial states that make a constant input of `x0` produce its steady-state response.
    fn steady_state(&self, x0: f64) -> Vec<[f64; 2]> {
        let mut level = x0;
        self.sections
            .iter()
            .map(|s| {
                let g = s.dc_gain();
                let out = g * level;
                let z1 = s.b[2] * level - s.a[2] * out;
                let z0 = s.b[1] * level - s.a[1] * out + z1;
                level = out;
                [z0, z1]
            })
            .collect()
    }

    /// Zero-phase forward–backward filtering with odd-extension padding and
    /// steady-state initial conditions. The effective response is `|H|²`.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let zeros_b = self.sections.iter().filter(|s| s.b[2] == 0.0).count();
        let zeros_a = self.sections.iter().filter(|s| s.a[2] == 0.0).count();
        let pad = (3 * (2 * self.sections.len() + 1 - zeros_b.min(zeros_a))).min(x.len() - 1);
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let fwd = self.filter(&ext, self.steady_state(ext[0]));
        let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
        rev = self.filter(&rev, self.steady_state(rev[0]));
        rev.reverse();
        rev[pad..pad + n].to_vec()
    }
}

/// Pre-warped analog angular frequency for a digital frequency `f` at rate `fs`.
pub fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

/// Digital Butterworth band-pass from an order-`order` low-pass prototype
/// (low-pass → band-pass, then bilinear transform with pre-warped edges).
/// The cascade has `order` biquads.
pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 || !(0.0 < low_hz && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::InvalidSpec(format!(
            "band-pass needs 0 < low < high < Nyquist; got {low_hz}–{high_hz} Hz at fs {fs}"
        )));
    }
    let w1 = prewarp(low_hz, fs);
    let w2 = prewarp(high_hz, fs);
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();
    let k2 = 2.0 * fs;
    let mut sections = Vec::with_capacity(order);
    for k in 0..order {
        // upper-half-plane prototype poles only; their conjugates complete each pair
        let proto = Complex64::from_polar(1.0, PI * (2 * k + order + 1) as f64 / (2 * order) as f64);
        let scaled = proto * (bw / 2.0);
        let disc = (scaled * scaled - w0 * w0).sqrt();
        for analog in [scaled + disc, scaled - disc] {
            if analog.im < 0.0 {
                continue;
            }
            let p = (k2 + analog) / (k2 - analog);
            sections.push(Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * p.re, p.norm_sqr()] });
        }
    }
    if sections.len() != order {
        return Err(Error::InvalidSpec("band-pass pole pairing failed".into()));
    }
    // unit gain at the (digital image of the) geometric centre frequency
    let wc = 2.0 * (w0 / k2).atan();
    let g = 1.0 / Sos { sections: sections.clone() }.response(wc).norm();
    sections[0].b.iter_mut().for_each(|v| *v *= g);
    Ok(Sos { sections })
}

/// Second-order IIR notch at `f0` with quality factor `q` (bandwidth `f0/q` at −3 dB).
pub fn iir_notch(f0: f64, q: f64, fs: f64) -> Result<Sos> {
    if !(f0 > 0.0 && f0 < fs / 2.0) || q <= 0.0 {
        return Err(Error::InvalidSpec(format!("notch at {f0} Hz needs 0 < f0 < Nyquist ({})", fs / 2.0)));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Sos {
        sections: vec![Biquad {
            b: [gain, -2.0 * gain * c, gain],
            a: [1.0, -2.0 * gain * c, 2.0 * gain - 1.0],
        }],
    })
}
