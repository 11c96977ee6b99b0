//! Seeded synthetic EEG / ECG / PPG surrogates and labeled toy tasks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch_embed::{ecg_lead_coordinates, STANDARD_LEADS};
use crate::sigproc::{segment_and_patch, zscore_normalize, Channel, Modality, MultimodalRecord, PatchGrid, TARGET_FS};
use crate::trainer::{mix_seed, Dataset, Labels};

/// 10-20 electrodes with approximate unit-sphere positions (x right, y nose, z up).
const EEG_MONTAGE: [(&str, [f64; 3]); 19] = [
    ("Fp1", [-0.31, 0.95, 0.0]),
    ("Fp2", [0.31, 0.95, 0.0]),
    ("C3", [-0.72, 0.0, 0.69]),
    ("C4", [0.72, 0.0, 0.69]),
    ("O1", [-0.31, -0.95, 0.0]),
    ("O2", [0.31, -0.95, 0.0]),
    ("F3", [-0.55, 0.67, 0.5]),
    ("F4", [0.55, 0.67, 0.5]),
    ("P3", [-0.55, -0.67, 0.5]),
    ("P4", [0.55, -0.67, 0.5]),
    ("T3", [-1.0, 0.0, 0.0]),
    ("T4", [1.0, 0.0, 0.0]),
    ("Fz", [0.0, 0.72, 0.69]),
    ("Cz", [0.0, 0.0, 1.0]),
    ("Pz", [0.0, -0.72, 0.69]),
    ("F7", [-0.81, 0.59, 0.0]),
    ("F8", [0.81, 0.59, 0.0]),
    ("T5", [-0.81, -0.59, 0.0]),
    ("T6", [0.81, -0.59, 0.0]),
];

/// Width of the biphasic QRS surrogate.
const QRS_SIGMA_S: f64 = 0.012;
/// Fraction of the beat period occupied by one PPG pulse.
const PPG_DUTY: f64 = 0.6;

/// Knobs of the surrogate generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub heart_rate_hz: f64,
    pub eeg_rhythm_hz: f64,
    /// Peak rhythm amplitude relative to the unit-variance background.
    pub rhythm_amplitude: f64,
    /// Std of white noise added to every channel.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { heart_rate_hz: 1.0, eeg_rhythm_hz: 10.0, rhythm_amplitude: 1.5, noise: 0.02 }
    }
}

/// Default channel count per modality.
pub fn default_channels(m: Modality) -> usize {
    match m {
        Modality::Eeg => 4,
        Modality::Ecg => 3,
        Modality::Ppg => 1,
    }
}

/// One-modality record with the default channel count and parameters.
pub fn generate_synthetic(modality: Modality, seconds: f64, fs: f64, seed: u64) -> Result<MultimodalRecord> {
    generate(modality, seconds, fs, seed, default_channels(modality), &SynthParams::default())
}

pub fn generate(
    modality: Modality,
    seconds: f64,
    fs: f64,
    seed: u64,
    channels: usize,
    params: &SynthParams,
) -> Result<MultimodalRecord> {
    if !(seconds > 0.0) || !(fs > 0.0) {
        return Err(Error::Config(format!("need positive duration and rate, got {seconds} s at {fs} Hz")));
    }
    if channels == 0 {
        return Err(Error::Config("need at least one channel".into()));
    }
    let n = (seconds * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, modality.index() as u64, 0));
    let channels = match modality {
        Modality::Eeg => eeg(n, fs, channels, params, &mut rng),
        Modality::Ecg => ecg(n, fs, channels, params, &mut rng)?,
        Modality::Ppg => ppg(n, fs, channels, params, &mut rng),
    };
    Ok(MultimodalRecord { channels, sample_rate_hz: fs })
}

/// Concatenate single-modality records that share rate and length.
pub fn combine(records: Vec<MultimodalRecord>) -> Result<MultimodalRecord> {
    let fs = records.first().map_or(TARGET_FS, |r| r.sample_rate_hz);
    let channels = records.into_iter().flat_map(|r| r.channels).collect();
    let rec = MultimodalRecord { channels, sample_rate_hz: fs };
    rec.validate()?;
    Ok(rec)
}

fn white(rng: &mut ChaCha8Rng) -> f64 {
    // unit variance
    rng.gen_range(-1.0..1.0) * 3f64.sqrt()
}

/// Unit-variance 1/f noise, shaped in the frequency domain.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(white(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for k in 1..n {
        // symmetric gain keeps the inverse real
        buf[k] /= (k.min(n - k) as f64).sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    zscore_normalize(&buf.iter().map(|c| c.re).collect::<Vec<_>>())
}

/// Smooth on/off envelope of 0.5–1.5 s bursts separated by 0.5–1.5 s gaps.
fn burst_envelope(n: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let mut t = rng.gen_range(0.0..1.0) * fs;
    while (t as usize) < n {
        let len = rng.gen_range(0.5..1.5) * fs;
        let start = t as usize;
        for i in start..((t + len) as usize).min(n) {
            env[i] = 0.5 * (1.0 - (2.0 * PI * (i - start) as f64 / len).cos());
        }
        t += len + rng.gen_range(0.5..1.5) * fs;
    }
    env
}

fn eeg(n: usize, fs: f64, channels: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Channel> {
    (0..channels)
        .map(|c| {
            let (label, coords) = match EEG_MONTAGE.get(c) {
                Some((l, xyz)) => (l.to_string(), *xyz),
                None => {
                    let az = 2.0 * PI * c as f64 / channels as f64;
                    (format!("EEG{}", c + 1), [0.9 * az.cos(), 0.9 * az.sin(), 0.3])
                }
            };
            let bg = pink_noise(n, rng);
            let env = burst_envelope(n, fs, rng);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    bg[i] + p.rhythm_amplitude * env[i] * (2.0 * PI * p.eeg_rhythm_hz * t + phase).sin() + p.noise * white(rng)
                })
                .collect();
            Channel { modality: Modality::Eeg, label, coords, samples }
        })
        .collect()
}

/// Beat onset times `t0 + k/rate` covering `[−1, n/fs + 1]` seconds.
fn beats(n: usize, fs: f64, rate: f64, t0: f64) -> Vec<f64> {
    let end = n as f64 / fs + 1.0;
    let mut t = t0 - ((t0 + 1.0) * rate).ceil() / rate;
    let mut out = Vec::new();
    while t < end {
        out.push(t);
        t += 1.0 / rate;
    }
    out
}

fn ecg(n: usize, fs: f64, channels: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Result<Vec<Channel>> {
    if channels > STANDARD_LEADS.len() {
        return Err(Error::Config(format!("at most {} ECG leads", STANDARD_LEADS.len())));
    }
    let times = beats(n, fs, p.heart_rate_hz, 0.0);
    (0..channels)
        .map(|c| {
            let label = STANDARD_LEADS[c];
            let coords = ecg_lead_coordinates(label)?;
            // projection of a fixed 60° cardiac axis onto the lead direction
            let along = (coords[1].atan2(coords[0]) - 60f64.to_radians()).cos();
            let gain = if along.abs() < 0.3 { 0.3f64.copysign(along) } else { along };
            let wander_phase = rng.gen_range(0.0..2.0 * PI);
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let qrs: f64 = times
                        .iter()
                        .map(|&tb| {
                            let u = (t - tb) / QRS_SIGMA_S;
                            if u.abs() < 8.0 {
                                u * (0.5 - 0.5 * u * u).exp()
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    gain * qrs + 0.15 * (2.0 * PI * 0.25 * t + wander_phase).sin() + p.noise * white(rng)
                })
                .collect();
            Ok(Channel { modality: Modality::Ecg, label: label.to_string(), coords, samples })
        })
        .collect()
}

fn ppg(n: usize, fs: f64, channels: usize, p: &SynthParams, rng: &mut ChaCha8Rng) -> Vec<Channel> {
    let times = beats(n, fs, p.heart_rate_hz, 0.0);
    let width = PPG_DUTY / p.heart_rate_hz;
    (0..channels)
        .map(|c| {
            // transit delay after the QRS
            let delay = 0.2 + 0.02 * c as f64;
            let samples = (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    let pulse: f64 = times
                        .iter()
                        .map(|&tb| {
                            let u = (t - tb - delay) / width;
                            if (0.0..1.0).contains(&u) {
                                0.5 * (1.0 - (2.0 * PI * u).cos())
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    pulse + p.noise * white(rng)
                })
                .collect();
            Channel { modality: Modality::Ppg, label: format!("PPG{}", c + 1), coords: [0.0; 3], samples }
        })
        .collect()
}

/// Recipe for a labeled synthetic task.
///
/// Single-label: class `k` sets the EEG rhythm to `6 + 4k` Hz and the heart rate
/// to `0.9 + 0.35k` Hz, each jittered. Multi-label: two independent labels,
/// "fast EEG rhythm" and "fast heart rate".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub windows: usize,
    pub window_s: f64,
    pub classes: usize,
    pub seed: u64,
    pub eeg_channels: usize,
    pub ecg_channels: usize,
    pub ppg_channels: usize,
    /// Std of white noise added after generation (signals are unit scale).
    pub noise: f64,
    pub multilabel: bool,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            windows: 60,
            window_s: 2.0,
            classes: 5,
            seed: 0,
            eeg_channels: 2,
            ecg_channels: 2,
            ppg_channels: 1,
            noise: 0.3,
            multilabel: false,
        }
    }
}

/// One synthetic window with the given generator parameters, z-scored per channel.
pub fn synth_window(spec: &TaskSpec, params: &SynthParams, seed: u64) -> Result<PatchGrid> {
    let mut parts = Vec::new();
    for (m, n) in [(Modality::Eeg, spec.eeg_channels), (Modality::Ecg, spec.ecg_channels), (Modality::Ppg, spec.ppg_channels)] {
        if n > 0 {
            parts.push(generate(m, spec.window_s, TARGET_FS, mix_seed(seed, 20, m.index() as u64), n, params)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rec = combine(parts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 21, 0));
    for ch in &mut rec.channels {
        let noisy: Vec<f64> = ch.samples.iter().map(|v| v + spec.noise * white(&mut rng)).collect();
        ch.samples = zscore_normalize(&noisy);
    }
    segment_and_patch(&rec, spec.window_s)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidWindow(format!("{} s yields no window", spec.window_s)))
}

/// Generate a labeled dataset. Window `i` of a single-label task has class `i mod K`.
pub fn labeled_task(spec: &TaskSpec) -> Result<Dataset> {
    if spec.windows == 0 || (!spec.multilabel && spec.classes < 2) {
        return Err(Error::Config("a task needs windows and at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 22, 0));
    let mut windows = Vec::with_capacity(spec.windows);
    let mut single = Vec::new();
    let mut multi = Vec::new();
    for i in 0..spec.windows {
        let jitter_eeg = rng.gen_range(-0.5..0.5);
        let jitter_hr = rng.gen_range(-0.05..0.05);
        let params = if spec.multilabel {
            let (fast_eeg, fast_heart) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            multi.push(vec![fast_eeg, fast_heart]);
            SynthParams {
                eeg_rhythm_hz: if fast_eeg { 16.0 } else { 8.0 } + jitter_eeg,
                heart_rate_hz: if fast_heart { 1.6 } else { 0.9 } + jitter_hr,
                ..SynthParams::default()
            }
        } else {
            let k = i % spec.classes;
            single.push(k);
            SynthParams {
                eeg_rhythm_hz: 6.0 + 4.0 * k as f64 + jitter_eeg,
                heart_rate_hz: 0.9 + 0.35 * k as f64 + jitter_hr,
                ..SynthParams::default()
            }
        };
        windows.push(synth_window(spec, &params, mix_seed(spec.seed, 23, i as u64))?);
    }
    let labels = if spec.multilabel { Labels::Multi(multi) } else { Labels::Single(single) };
    Dataset::new(windows, labels)
}
