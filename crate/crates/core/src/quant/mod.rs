//! Uniform fake quantization.
//!
//! Weights use symmetric per-output-channel grids, activations asymmetric
//! per-tensor grids whose range comes from calibration statistics clipped at the
//! 99.9th percentile of `|x|`. Rounding is half-to-even everywhere.

mod calib;
mod model_quant;

pub use calib::{CalibStats, SiteStats, CLIP_PERCENTILE};
pub use model_quant::{
    apply_ptq, calibrate, packed_size_bytes, qat_finetune, quant_sites, quantized_layers, PackedSize, QuantState, QAT_EPOCHS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest scale any calibrated or weight-derived grid may use.
pub const MIN_SCALE: f64 = 1e-8;

/// Integer grid plus per-channel (or single) scale and zero point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrid {
    pub scales: Vec<f64>,
    pub zero_points: Vec<f64>,
    pub qmin: f64,
    pub qmax: f64,
}

/// Symmetric signed range `±(2^{b-1} − 1)`; INT2 gives `{−1, 0, 1}`.
pub fn symmetric_range(bits: u32) -> (f64, f64) {
    let m = ((1u64 << (bits - 1)) - 1) as f64;
    (-m, m)
}

/// Unsigned range `0 ..= 2^b − 1`.
pub fn asymmetric_range(bits: u32) -> (f64, f64) {
    (0.0, ((1u64 << bits) - 1) as f64)
}

/// Quantise-dequantise one value. The flag reports whether the unclamped integer
/// fell inside `[qmin, qmax]`, which is where the straight-through gradient is 1.
#[inline]
pub fn qdq_value(x: f64, scale: f64, zero_point: f64, qmin: f64, qmax: f64) -> (f64, bool) {
    let q = (x / scale).round_ties_even() + zero_point;
    let inside = (qmin..=qmax).contains(&q);
    ((q.clamp(qmin, qmax) - zero_point) * scale, inside)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Calibration(format!("scale must be positive, got {scale}")));
    }
    Ok(())
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!("unsupported bit width {bits}")));
    }
    Ok(())
}

/// Symmetric fake quantization (`zero_point = 0`) with one scale for the whole tensor.
pub fn qdq_symmetric(x: &Tensor, bits: u32, scale: f64) -> Result<Tensor> {
    check_bits(bits)?;
    check_scale(scale)?;
    let (lo, hi) = symmetric_range(bits);
    Ok(x.map(|v| qdq_value(v, scale, 0.0, lo, hi).0))
}

/// Asymmetric fake quantization onto `0 ..= 2^b − 1`.
pub fn qdq_asymmetric(x: &Tensor, bits: u32, scale: f64, zero_point: f64) -> Result<Tensor> {
    check_bits(bits)?;
    check_scale(scale)?;
    let (lo, hi) = asymmetric_range(bits);
    Ok(x.map(|v| qdq_value(v, scale, zero_point, lo, hi).0))
}

/// Per-output-channel symmetric grid for a weight whose leading axis indexes output channels.
pub fn weight_grid(w: &Tensor, bits: u32) -> QuantGrid {
    let (qmin, qmax) = symmetric_range(bits);
    let rows = w.shape()[0];
    let per = w.numel() / rows.max(1);
    let scales = w
        .data()
        .chunks(per.max(1))
        .map(|r| (r.iter().fold(0.0f64, |m, v| m.max(v.abs())) / qmax).max(MIN_SCALE))
        .collect::<Vec<_>>();
    QuantGrid { zero_points: vec![0.0; scales.len()], scales, qmin, qmax }
}

/// Per-tensor asymmetric grid covering `[lo, hi]` (widened to include zero).
pub fn activation_grid(lo: f64, hi: f64, bits: u32) -> QuantGrid {
    let (qmin, qmax) = asymmetric_range(bits);
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let scale = ((hi - lo) / qmax).max(MIN_SCALE);
    let zp = (-lo / scale).round_ties_even().clamp(qmin, qmax);
    QuantGrid { scales: vec![scale], zero_points: vec![zp], qmin, qmax }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Ptq,
    Qat,
}

/// Bit widths and strategy. Only the four (weight, activation) pairs
/// (8,8), (4,8), (2,8) and (4,4) are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub mode: QuantMode,
}

pub const ALLOWED_CONFIGS: [(u32, u32); 4] = [(8, 8), (4, 8), (2, 8), (4, 4)];

impl QuantSpec {
    pub fn new(weight_bits: u32, act_bits: u32, mode: QuantMode) -> Result<Self> {
        let s = Self { weight_bits, act_bits, mode };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_CONFIGS.contains(&(self.weight_bits, self.act_bits)) {
            return Err(Error::Config(format!(
                "(W{}, A{}) is not a supported configuration; choose one of (8,8), (4,8), (2,8), (4,4)",
                self.weight_bits, self.act_bits
            )));
        }
        Ok(())
    }
}
