//! Analytic parameter, MAC, latency and battery accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Group, Model};
use crate::numerics::rfft_macs;
use crate::patch_embed::{feature_width, CONV1_KERNEL, CONV2_KERNEL, CONV_OUT_LEN};
use crate::quant::{packed_size_bytes, QuantSpec};
use crate::sigproc::{PATCH_LEN, TARGET_FS};

/// Acquisition time of one patch: 32 samples at 256 Hz.
pub const PATCH_MS: f64 = PATCH_LEN as f64 / TARGET_FS * 1000.0;
/// 300 mAh at 3.7 V.
pub const BATTERY_J: f64 = 4000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub by_group: BTreeMap<String, usize>,
}

pub fn count_params(model: &Model) -> ParamCount {
    let mut c = ParamCount { total: 0, trainable: 0, frozen: 0, by_group: BTreeMap::new() };
    for (_, p) in model.params.iter() {
        let n = p.value.numel();
        c.total += n;
        if p.trainable {
            c.trainable += n;
        } else {
            c.frozen += n;
        }
        *c.by_group.entry(p.group.name().to_string()).or_insert(0) += n;
    }
    c
}

fn attention_macs(d: u64, rows_q: u64, rows_kv: u64, batch: u64, lq: u64, lk: u64) -> u64 {
    // q/o projections on query rows, k/v on key rows, scores and context per batch item
    2 * rows_q * d * d + 2 * rows_kv * d * d + 2 * batch * lq * lk * d
}

/// MACs of one classification forward pass (patch encoder, unifier, temporal
/// stack and head) over `c` channels and `p` patches. Adapters, if attached,
/// are included. The reconstruction decoder is not.
pub fn count_macs(model: &Model, c: usize, p: usize) -> u64 {
    let mut total = macs_for(&model.config, c, p);
    if model.has_lora() {
        let cfg = &model.config;
        let (d, q, r) = (cfg.d_model as u64, cfg.num_queries as u64, cfg.lora.rank as u64);
        let s = p as u64 * q;
        // q and v projections of unifier self-attention and of each temporal layer
        total += 2 * cfg.unifier_depth as u64 * s * r * 2 * d;
        total += 2 * cfg.temporal_layers as u64 * s * r * 2 * d;
    }
    total
}

/// [`count_macs`] for a bare configuration without adapters.
pub fn macs_for(cfg: &EncoderConfig, c: usize, p: usize) -> u64 {
    let [c1, c2] = cfg.conv_channels.map(|v| v as u64);
    let (d, q, f, k) = (cfg.d_model as u64, cfg.num_queries as u64, cfg.ffn_width() as u64, cfg.num_classes as u64);
    let (c, p) = (c as u64, p as u64);
    let n = c * p;
    let s = p * q;

    let half = (PATCH_LEN / 2) as u64;
    let mut m = n * half * CONV1_KERNEL as u64 * c1;
    m += n * CONV_OUT_LEN as u64 * CONV2_KERNEL as u64 * c1 * c2;
    m += n * rfft_macs(PATCH_LEN);
    m += n * feature_width(cfg) as u64 * d;

    for b in 0..cfg.unifier_depth {
        let rows_q = if b == 0 { q } else { s };
        // cross-attention: q on the (shared or per-patch) query rows, k/v on tokens, o on every slot
        m += rows_q * d * d + 2 * n * d * d + 2 * p * q * c * d + s * d * d;
        m += attention_macs(d, s, s, p, q, q);
        m += 2 * s * d * f;
    }
    for _ in 0..cfg.temporal_layers {
        m += attention_macs(d, s, s, 1, s, s);
        m += 2 * s * d * f;
    }
    m += attention_macs(d, 1, s, 1, 1, s);
    m += d * k;
    m
}

/// Effective streaming latency: one patch of acquisition plus one inference.
pub fn streaming_latency_ms(compute_ms: f64, patch_ms: f64) -> f64 {
    patch_ms + compute_ms
}

/// Days of continuous inference, one inference per `window_s`.
pub fn battery_days(energy_mj_per_window: f64, window_s: f64, battery_j: f64) -> f64 {
    battery_j * 1000.0 / energy_mj_per_window * window_s / 86_400.0
}

/// Deployment cost of one model and input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub channels: usize,
    pub window_s: f64,
    pub patches: usize,
    pub params: ParamCount,
    pub macs: u64,
    pub quant: Option<QuantSpec>,
    pub packed_bytes: usize,
    pub compute_ms: f64,
    pub energy_mj: f64,
    pub streaming_latency_ms: f64,
    pub battery_days: f64,
}

/// Build a report. `compute_ms` and `energy_mj` are measured inputs from the
/// target hardware; the library only does the arithmetic around them.
pub fn cost_report(
    model: &Model,
    channels: usize,
    window_s: f64,
    quant: Option<QuantSpec>,
    compute_ms: f64,
    energy_mj: f64,
) -> Result<CostReport> {
    let win = (window_s * TARGET_FS).round() as usize;
    if channels == 0 || win < PATCH_LEN || win % PATCH_LEN != 0 {
        return Err(Error::Config(format!("need ≥1 channel and a window that is a multiple of {PATCH_LEN} samples")));
    }
    if !(compute_ms >= 0.0) || !(energy_mj > 0.0) {
        return Err(Error::Config("compute time must be non-negative and energy positive".into()));
    }
    let patches = win / PATCH_LEN;
    let packed_bytes = match &quant {
        Some(q) => packed_size_bytes(model, q)?.total_bytes,
        None => {
            4 * model.params.iter().filter(|(_, p)| p.group != Group::Decoder).map(|(_, p)| p.value.numel()).sum::<usize>()
        }
    };
    Ok(CostReport {
        channels,
        window_s,
        patches,
        params: count_params(model),
        macs: count_macs(model, channels, patches),
        quant,
        packed_bytes,
        compute_ms,
        energy_mj,
        streaming_latency_ms: streaming_latency_ms(compute_ms, PATCH_MS),
        battery_days: battery_days(energy_mj, window_s, BATTERY_J),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::synth::{labeled_task, TaskSpec};

    #[test]
    fn latency_and_battery_arithmetic() {
        assert_eq!(PATCH_MS, 125.0);
        assert_eq!(streaming_latency_ms(0.0, PATCH_MS), 125.0);
        assert!((streaming_latency_ms(325.6, PATCH_MS) - 450.6).abs() < 1e-9);
        assert!((battery_days(18.8, 10.0, BATTERY_J) - 24.6).abs() < 0.05);
        assert!((battery_days(68.65, 30.0, BATTERY_J) - 20.2).abs() < 0.05);
        assert!((battery_days(4e6, 86_400.0, BATTERY_J) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_macs_match_the_graph_counter() {
        for (c, p, lora) in [(1, 8, false), (5, 8, false), (3, 16, true)] {
            let mut m = Model::new(EncoderConfig { unifier_depth: 2, ..EncoderConfig::tiny() }, 0).unwrap();
            if lora {
                m.attach_lora(0).unwrap();
            }
            let spec = TaskSpec { windows: 1, window_s: p as f64 / 8.0, eeg_channels: c, ecg_channels: 0, ppg_channels: 0, ..TaskSpec::default() };
            let grid = &labeled_task(&TaskSpec { classes: 2, ..spec }).unwrap().windows[0];
            let mut s = m.session();
            m.logits(&mut s, grid).unwrap();
            assert_eq!(s.g.macs(), count_macs(&m, c, p), "C={c} P={p}");
        }
    }

    #[test]
    fn single_linear_and_lora_param_counts() {
        let m = Model::new(EncoderConfig::tiny(), 0).unwrap();
        let head = count_params(&m).by_group["head"];
        assert_eq!(head, crate::heads::ClassifierHead::num_params(&m.config));
        let mut l = m.clone();
        l.attach_lora(0).unwrap();
        let r = m.config.lora.rank;
        let d = m.config.d_model;
        assert_eq!(count_params(&l).total - count_params(&m).total, m.lora_targets().len() * r * (d + d));
    }

    #[test]
    fn report_is_deterministic() {
        let m = Model::new(EncoderConfig::tiny(), 0).unwrap();
        let a = cost_report(&m, 12, 10.0, None, 325.6, 18.8).unwrap();
        assert_eq!(a, cost_report(&m, 12, 10.0, None, 325.6, 18.8).unwrap());
        assert_eq!(a.patches, 80);
        assert!(cost_report(&m, 12, 0.1, None, 1.0, 1.0).is_err());
    }
}
