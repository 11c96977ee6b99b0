//! Signal conditioning: band-pass, notch, resampling to 256 Hz, per-channel
//! z-scoring, and cutting windows into 32-sample patches.
//!
//! Every step works on one channel at a time, so channels can be processed
//! independently or together with identical results.

mod iir;
mod resample;

pub use iir::{butter_bandpass, iir_notch, prewarp, Biquad, Sos};
pub use resample::{design_filter, rate_ratio, resample};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Common sampling rate of the encoder.
pub const TARGET_FS: f64 = 256.0;
/// Samples per patch (125 ms at 256 Hz).
pub const PATCH_LEN: usize = 32;
/// Butterworth prototype order of the band-pass.
pub const BANDPASS_ORDER: usize = 4;
/// Notch quality factor.
pub const NOTCH_Q: f64 = 30.0;
/// Fraction of Nyquist that default band edges are clamped to.
pub const NYQUIST_CLAMP: f64 = 0.99;
const ZSCORE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Eeg,
    Ecg,
    Ppg,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Eeg, Modality::Ecg, Modality::Ppg];

    /// Row of the sensor-type table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "EEG",
            Modality::Ecg => "ECG",
            Modality::Ppg => "PPG",
        }
    }

    /// Default pass band in Hz.
    pub fn band(self) -> (f64, f64) {
        match self {
            Modality::Eeg => (0.1, 75.0),
            Modality::Ecg => (0.5, 120.0),
            Modality::Ppg => (0.5, 8.0),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eeg" => Ok(Modality::Eeg),
            "ecg" => Ok(Modality::Ecg),
            "ppg" => Ok(Modality::Ppg),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One recorded channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub modality: Modality,
    pub label: String,
    pub coords: [f64; 3],
    pub samples: Vec<f64>,
}

/// Multichannel recording sharing one sampling rate and length.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalRecord {
    pub channels: Vec<Channel>,
    pub sample_rate_hz: f64,
}

impl MultimodalRecord {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut m: Vec<Modality> = self.channels.iter().map(|c| c.modality).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Keep only channels of the listed modalities.
    pub fn select(&self, keep: &[Modality]) -> MultimodalRecord {
        MultimodalRecord {
            channels: self.channels.iter().filter(|c| keep.contains(&c.modality)).cloned().collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Format(format!("sample rate {} must be positive", self.sample_rate_hz)));
        }
        let n = self.len();
        for c in &self.channels {
            if c.samples.len() != n {
                return Err(Error::Format(format!("channel {} has {} samples, expected {n}", c.label, c.samples.len())));
            }
            match c.modality {
                Modality::Eeg if c.coords.iter().any(|v| !(-1.0..=1.0).contains(v)) => {
                    return Err(Error::Format(format!("EEG channel {} coords {:?} outside the unit cube", c.label, c.coords)))
                }
                Modality::Ppg if c.coords != [0.0; 3] => {
                    return Err(Error::Format(format!("PPG channel {} must use the neutral coordinate", c.label)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass,
    Notch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub notch_hz: f64,
    pub q: f64,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Self {
        Self { kind: FilterKind::Bandpass, order: BANDPASS_ORDER, low_hz, high_hz, notch_hz: 0.0, q: 0.0, sample_rate_hz }
    }

    pub fn notch(notch_hz: f64, sample_rate_hz: f64) -> Self {
        Self { kind: FilterKind::Notch, order: 2, low_hz: 0.0, high_hz: 0.0, notch_hz, q: NOTCH_Q, sample_rate_hz }
    }

    /// Default band for a modality. An upper edge at or above Nyquist (e.g. ECG's
    /// 120 Hz at 200 Hz sampling) is clamped to 0.99·Nyquist with a warning.
    pub fn for_modality(m: Modality, sample_rate_hz: f64) -> Self {
        let (lo, mut hi) = m.band();
        let nyq = sample_rate_hz / 2.0;
        if hi >= nyq {
            let clamped = NYQUIST_CLAMP * nyq;
            log::warn!("{m} upper band edge {hi} Hz ≥ Nyquist {nyq} Hz; clamped to {clamped} Hz");
            hi = clamped;
        }
        Self::bandpass(lo, hi, sample_rate_hz)
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate_hz / 2.0;
        match self.kind {
            FilterKind::Bandpass => {
                if !(0.0 < self.low_hz && self.low_hz < self.high_hz && self.high_hz < nyq) {
                    return Err(Error::InvalidSpec(format!(
                        "band {}–{} Hz invalid at fs {} (Nyquist {nyq})",
                        self.low_hz, self.high_hz, self.sample_rate_hz
                    )));
                }
                if self.order != BANDPASS_ORDER {
                    return Err(Error::InvalidSpec(format!("band-pass order must be {BANDPASS_ORDER}, got {}", self.order)));
                }
            }
            FilterKind::Notch => {
                if !(self.notch_hz > 0.0 && self.notch_hz < nyq) {
                    return Err(Error::InvalidSpec(format!("notch {} Hz not below Nyquist {nyq}", self.notch_hz)));
                }
            }
        }
        Ok(())
    }

    pub fn design(&self) -> Result<Sos> {
        self.validate()?;
        match self.kind {
            FilterKind::Bandpass => butter_bandpass(self.order, self.low_hz, self.high_hz, self.sample_rate_hz),
            FilterKind::Notch => iir_notch(self.notch_hz, self.q, self.sample_rate_hz),
        }
    }
}

/// Zero-phase Butterworth band-pass; output length equals input length.
pub fn bandpass_filter(x: &[f64], spec: &FilterSpec) -> Result<Vec<f64>> {
    if spec.kind != FilterKind::Bandpass {
        return Err(Error::InvalidSpec("expected a band-pass spec".into()));
    }
    Ok(spec.design()?.filtfilt(x))
}

/// Zero-phase second-order notch (Q = 30).
pub fn notch_filter(x: &[f64], notch_hz: f64, fs: f64) -> Result<Vec<f64>> {
    Ok(FilterSpec::notch(notch_hz, fs).design()?.filtfilt(x))
}

/// `(x − mean) / (std + 1e-8)` with the population standard deviation.
pub fn zscore_normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + ZSCORE_EPS;
    x.iter().map(|v| (v - mean) / sd).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Mains frequency to notch out; `None` skips the notch.
    pub notch_hz: Option<f64>,
    pub target_fs: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { notch_hz: Some(50.0), target_fs: TARGET_FS }
    }
}

/// Condition one channel: band-pass → notch → resample → z-score.
pub fn preprocess_channel(ch: &Channel, fs: f64, cfg: &PreprocessConfig) -> Result<Channel> {
    let mut x = bandpass_filter(&ch.samples, &FilterSpec::for_modality(ch.modality, fs))?;
    if let Some(f0) = cfg.notch_hz {
        x = notch_filter(&x, f0, fs)?;
    }
    let x = resample(&x, fs, cfg.target_fs);
    Ok(Channel { samples: zscore_normalize(&x), ..ch.clone() })
}

pub fn preprocess(rec: &MultimodalRecord, cfg: &PreprocessConfig) -> Result<MultimodalRecord> {
    rec.validate()?;
    let channels = rec
        .channels
        .iter()
        .map(|c| preprocess_channel(c, rec.sample_rate_hz, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultimodalRecord { channels, sample_rate_hz: cfg.target_fs })
}

/// Per-channel metadata carried alongside the patch values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub modality: Modality,
    pub label: String,
    pub coords: [f64; 3],
}

/// One window cut into `[C × P × 32]` patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub values: Tensor,
    pub meta: Vec<ChannelMeta>,
    pub window_s: f64,
    pub fs: f64,
}

impl PatchGrid {
    pub fn new(values: Tensor, meta: Vec<ChannelMeta>, window_s: f64) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] != PATCH_LEN || s[0] != meta.len() {
            return Err(Error::Dimension(format!(
                "patch grid needs [C × P × {PATCH_LEN}] with C = {} channels, got {s:?}",
                meta.len()
            )));
        }
        Ok(Self { values, meta, window_s, fs: TARGET_FS })
    }

    /// `(channels, patches)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// Patch `p` of channel `c`.
    pub fn patch(&self, c: usize, p: usize) -> &[f64] {
        let (_, np) = self.dims();
        let off = (c * np + p) * PATCH_LEN;
        &self.values.data()[off..off + PATCH_LEN]
    }

    /// Concatenate the patches of channel `c` back into the window signal.
    pub fn channel_signal(&self, c: usize) -> &[f64] {
        let (_, np) = self.dims();
        &self.values.data()[c * np * PATCH_LEN..(c + 1) * np * PATCH_LEN]
    }

    /// Sub-grid holding only the listed channels, in the listed order.
    pub fn select_channels(&self, idx: &[usize]) -> Result<PatchGrid> {
        let (_, p) = self.dims();
        let mut data = Vec::with_capacity(idx.len() * p * PATCH_LEN);
        let mut meta = Vec::with_capacity(idx.len());
        for &c in idx {
            data.extend_from_slice(self.channel_signal(c));
            meta.push(self.meta[c].clone());
        }
        PatchGrid::new(Tensor::new(vec![idx.len(), p, PATCH_LEN], data)?, meta, self.window_s)
    }

    pub fn select_modalities(&self, keep: &[Modality]) -> Result<PatchGrid> {
        let idx: Vec<usize> = (0..self.meta.len()).filter(|&c| keep.contains(&self.meta[c].modality)).collect();
        self.select_channels(&idx)
    }
}

/// Cut a 256 Hz record into non-overlapping windows; a trailing partial window is dropped.
pub fn segment_and_patch(rec: &MultimodalRecord, window_s: f64) -> Result<Vec<PatchGrid>> {
    if (rec.sample_rate_hz - TARGET_FS).abs() > 1e-9 {
        return Err(Error::Config(format!("segmenting expects {TARGET_FS} Hz input, got {}", rec.sample_rate_hz)));
    }
    let win = (window_s * TARGET_FS).round() as usize;
    if win < PATCH_LEN || win % PATCH_LEN != 0 {
        return Err(Error::InvalidWindow(format!(
            "{window_s} s = {win} samples is not a positive multiple of {PATCH_LEN}"
        )));
    }
    rec.validate()?;
    let p = win / PATCH_LEN;
    let c = rec.channels.len();
    let meta: Vec<ChannelMeta> = rec
        .channels
        .iter()
        .map(|ch| ChannelMeta { modality: ch.modality, label: ch.label.clone(), coords: ch.coords })
        .collect();
    (0..rec.len() / win)
        .map(|w| {
            let mut data = Vec::with_capacity(c * win);
            for ch in &rec.channels {
                data.extend_from_slice(&ch.samples[w * win..(w + 1) * win]);
            }
            PatchGrid::new(Tensor::new(vec![c, p, PATCH_LEN], data)?, meta.clone(), window_s)
        })
        .collect()
}
