use std::f64::consts::PI;

use biofuse::sigproc::{
    bandpass_filter, notch_filter, preprocess, resample, segment_and_patch, Channel, FilterSpec, Modality,
    MultimodalRecord, PreprocessConfig,
};
use proptest::prelude::*;

fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
}

/// Least-squares amplitude of a sine at `f` over the middle half of `y`.
fn amplitude(y: &[f64], f: f64, fs: f64) -> f64 {
    let w = 2.0 * PI * f / fs;
    let n = y.len();
    let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in y.iter().enumerate().take(3 * n / 4).skip(n / 4) {
        let (s, c) = (w * i as f64).sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        ys += v * s;
        yc += v * c;
    }
    let det = ss * cc - sc * sc;
    let (a, b) = ((ys * cc - yc * sc) / det, (yc * ss - ys * sc) / det);
    (a * a + b * b).sqrt()
}

fn analog_gain(f: f64, lo: f64, hi: f64, fs: f64) -> f64 {
    let om = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (o, o1, o2) = (om(f), om(lo), om(hi));
    let x = (o * o - o1 * o2) / (o * (o2 - o1));
    // forward-backward application squares the magnitude
    1.0 / (1.0 + x.powi(8))
}

#[test]
fn eeg_band_rejects_dc() {
    let y = bandpass_filter(&vec![1.0; 256 * 60], &FilterSpec::for_modality(Modality::Eeg, 256.0)).unwrap();
    let mid = &y[y.len() / 4..3 * y.len() / 4];
    assert!(mid.iter().all(|v| v.abs() < 1e-3));
}

#[test]
fn eeg_band_at_10hz_matches_oracle_within_one_percent() {
    let spec = FilterSpec::for_modality(Modality::Eeg, 256.0);
    let y = bandpass_filter(&sine(10.0, 256.0, 256 * 60), &spec).unwrap();
    let want = analog_gain(10.0, spec.low_hz, spec.high_hz, 256.0);
    assert!((amplitude(&y, 10.0, 256.0) / want - 1.0).abs() < 0.01);
}

#[test]
fn ppg_band_attenuates_150hz_by_40db() {
    // 150 Hz sampled at 256 Hz aliases to 106 Hz; the samples are what the filter sees.
    let y = bandpass_filter(&sine(150.0, 256.0, 256 * 20), &FilterSpec::for_modality(Modality::Ppg, 256.0)).unwrap();
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let mid = &y[y.len() / 4..3 * y.len() / 4];
    assert!(20.0 * (rms(mid) / (0.5f64).sqrt()).log10() < -40.0);
}

#[test]
fn notch_at_256hz() {
    let n = 256 * 30;
    let at50 = amplitude(&notch_filter(&sine(50.0, 256.0, n), 50.0, 256.0).unwrap(), 50.0, 256.0);
    assert!(20.0 * at50.log10() <= -30.0);
    let at10 = amplitude(&notch_filter(&sine(10.0, 256.0, n), 50.0, 256.0).unwrap(), 10.0, 256.0);
    assert!((at10 - 1.0).abs() < 0.01);
}

#[test]
fn resampler_length_and_sine_fidelity() {
    let y = resample(&sine(5.0, 500.0, 5000), 500.0, 256.0);
    assert_eq!(y.len(), 2560);
    let x = sine(5.0, 256.0, 2560);
    let (a, b) = (256, 2304);
    let dot: f64 = y[a..b].iter().zip(&x[a..b]).map(|(p, q)| p * q).sum();
    let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
    assert!(dot / (norm(&y[a..b]) * norm(&x[a..b])) > 0.999);
    let z = sine(3.0, 256.0, 1000);
    assert_eq!(resample(&z, 256.0, 256.0), z);
}

#[test]
fn filtering_is_zero_phase() {
    // a symmetric pulse far from the edges stays symmetric about its centre
    let (n, c) = (40_001, 20_000);
    let x: Vec<f64> = (0..n).map(|i| (-((i as f64 - c as f64) / 20.0).powi(2)).exp()).collect();
    let y = bandpass_filter(&x, &FilterSpec::for_modality(Modality::Ecg, 500.0)).unwrap();
    for k in 1..400 {
        assert!((y[c - k] - y[c + k]).abs() < 1e-6 * y[c].abs(), "asymmetry at lag {k}");
    }
    let peak = (0..n).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
    assert_eq!(peak, c);
}

fn record(seed: u64) -> MultimodalRecord {
    let mk = |m: Modality, k: u64| Channel {
        modality: m,
        label: format!("{m}{k}"),
        coords: if m == Modality::Ppg { [0.0; 3] } else { [0.1 * k as f64, 0.2, 0.3] },
        samples: (0..2500).map(|i| ((i as f64) * 0.01 * (seed + k + 1) as f64).sin() + 0.3 * (i as f64 * 0.37).cos()).collect(),
    };
    MultimodalRecord {
        channels: vec![mk(Modality::Eeg, 0), mk(Modality::Ecg, 1), mk(Modality::Ppg, 2)],
        sample_rate_hz: 500.0,
    }
}

#[test]
fn channels_are_processed_independently() {
    let rec = record(3);
    let cfg = PreprocessConfig::default();
    let joint = preprocess(&rec, &cfg).unwrap();
    for (i, ch) in rec.channels.iter().enumerate() {
        let alone = preprocess(&MultimodalRecord { channels: vec![ch.clone()], sample_rate_hz: 500.0 }, &cfg).unwrap();
        assert_eq!(alone.channels[0], joint.channels[i]);
    }
    let grids = segment_and_patch(&joint, 2.5).unwrap();
    assert_eq!(grids[0].dims(), (3, 20));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bandpass_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let spec = FilterSpec::for_modality(Modality::Eeg, 256.0);
        let x: Vec<f64> = (0..512).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0).collect();
        let y: Vec<f64> = (0..512).map(|i| (0.05 * i as f64 + seed as f64).sin()).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = bandpass_filter(&x, &spec).unwrap();
        let fy = bandpass_filter(&y, &spec).unwrap();
        let fm = bandpass_filter(&mix, &spec).unwrap();
        for i in 0..512 {
            prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }
}
