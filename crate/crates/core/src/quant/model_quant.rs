use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CalibStats, QuantMode, QuantSpec};
use crate::error::{Error, Result};
use crate::model::{Group, Model, ParamKind};
use crate::sigproc::PatchGrid;
use crate::trainer::{self, Dataset, FinetuneOutcome, TrainConfig, TrainLog};

/// Fine-tuning epochs for quantization-aware training.
pub const QAT_EPOCHS: usize = 15;

/// Bytes stored per activation site (scale + zero point as f32).
const ACT_SITE_BYTES: usize = 8;

/// Quantization attached to a model: bit widths plus the calibrated clip range
/// of every activation site (the input of each quantized linear layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub spec: QuantSpec,
    pub act_ranges: BTreeMap<String, (f64, f64)>,
}

impl QuantState {
    pub fn range(&self, site: &str) -> Result<(f64, f64)> {
        self.act_ranges
            .get(site)
            .copied()
            .ok_or_else(|| Error::Calibration(format!("activation site `{site}` was never calibrated")))
    }
}

/// Linear layers of the deployed classifier: every weight matrix outside the
/// pretraining decoder. Adapters must be merged first.
pub fn quantized_layers(model: &Model) -> Vec<String> {
    model
        .params
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && !matches!(p.group, Group::Decoder | Group::Lora))
        .filter_map(|(n, _)| n.strip_suffix(".weight").map(str::to_string))
        .collect()
}

/// Activation sites that need a calibrated range.
pub fn quant_sites(model: &Model) -> Vec<String> {
    quantized_layers(model).into_iter().map(|l| format!("{l}.input")).collect()
}

fn merged(model: &Model) -> Result<Model> {
    let mut m = model.clone();
    m.merge_lora()?;
    m.quant = None;
    Ok(m)
}

/// Run the full-precision classifier over `windows` and record activation statistics.
pub fn calibrate(model: &Model, windows: &[PatchGrid]) -> Result<CalibStats> {
    if windows.is_empty() {
        return Err(Error::Calibration("calibration needs at least one batch".into()));
    }
    let m = merged(model)?;
    let mut stats = CalibStats::default();
    for w in windows {
        let mut s = m.session().with_calibration();
        m.logits(&mut s, w)?;
        let mut one = s.take_calibration().expect("calibration session");
        one.batches = 1;
        stats.merge(&one);
    }
    Ok(stats)
}

/// Attach fake quantization to a copy of `model`. Parameters are not modified
/// (beyond folding any LoRA adapters into their base weights).
pub fn apply_ptq(model: &Model, spec: QuantSpec, stats: &CalibStats) -> Result<Model> {
    spec.validate()?;
    let mut m = merged(model)?;
    let mut act_ranges = BTreeMap::new();
    for site in quant_sites(&m) {
        let st = stats.site(&site)?;
        act_ranges.insert(site, st.clip_range());
    }
    m.quant = Some(QuantState { spec, act_ranges });
    Ok(m)
}

/// Calibrate, convert, then fine-tune every parameter with fake quantization in
/// the forward pass and straight-through gradients. Activation ranges stay at
/// their calibrated values; weight scales follow the weights. With zero epochs
/// the result is the PTQ model.
pub fn qat_finetune(
    model: &Model,
    spec: QuantSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<FinetuneOutcome> {
    let stats = calibrate(model, &train.windows)?;
    let mut m = apply_ptq(model, QuantSpec { mode: QuantMode::Qat, ..spec }, &stats)?;
    m.set_trainable(|_, _| true);
    trainer::fit(m, train, val, cfg, log)
}

/// Theoretical storage of the deployed classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSize {
    /// Everything stored as 32-bit floats.
    pub fp32_bytes: usize,
    /// The quantized weight matrices alone at 32 bits.
    pub weight_fp32_bytes: usize,
    /// The same matrices packed at `weight_bits`.
    pub weight_packed_bytes: usize,
    /// Per-output-channel weight scales plus activation scale/zero-point pairs.
    pub overhead_bytes: usize,
    /// Embeddings, norms and biases, kept at 32 bits.
    pub fp32_rest_bytes: usize,
    pub total_bytes: usize,
}

/// Packed size of `model` (decoder excluded) under `spec`.
pub fn packed_size_bytes(model: &Model, spec: &QuantSpec) -> Result<PackedSize> {
    spec.validate()?;
    let m = merged(model)?;
    let layers = quantized_layers(&m);
    let mut out = PackedSize {
        fp32_bytes: 0,
        weight_fp32_bytes: 0,
        weight_packed_bytes: 0,
        overhead_bytes: 0,
        fp32_rest_bytes: 0,
        total_bytes: 0,
    };
    for (name, p) in m.params.iter() {
        if p.group == Group::Decoder {
            continue;
        }
        let n = p.value.numel();
        out.fp32_bytes += 4 * n;
        let is_layer = name.strip_suffix(".weight").is_some_and(|l| layers.iter().any(|x| x == l));
        if is_layer {
            out.weight_fp32_bytes += 4 * n;
            out.weight_packed_bytes += (spec.weight_bits as usize * n).div_ceil(8);
            out.overhead_bytes += 4 * p.value.shape()[0];
        } else {
            out.fp32_rest_bytes += 4 * n;
        }
    }
    out.overhead_bytes += ACT_SITE_BYTES * layers.len();
    out.total_bytes = out.weight_packed_bytes + out.overhead_bytes + out.fp32_rest_bytes;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::workbench::synth::{labeled_task, TaskSpec};

    fn windows() -> Vec<PatchGrid> {
        labeled_task(&TaskSpec { windows: 3, window_s: 1.0, seed: 2, ..TaskSpec::default() }).unwrap().windows
    }

    #[test]
    fn calibration_covers_every_site() {
        let m = Model::new(EncoderConfig::tiny(), 1).unwrap();
        let st = calibrate(&m, &windows()).unwrap();
        for site in quant_sites(&m) {
            let s = st.site(&site).unwrap();
            assert!(s.min <= s.max && s.count > 0);
        }
        assert_eq!(st.batches, 3);
        assert!(matches!(calibrate(&m, &[]), Err(Error::Calibration(_))));
    }

    #[test]
    fn missing_site_is_a_calibration_error() {
        let m = Model::new(EncoderConfig::tiny(), 1).unwrap();
        let mut st = calibrate(&m, &windows()).unwrap();
        st.sites.remove("head.classifier.input");
        let spec = QuantSpec::new(8, 8, QuantMode::Ptq).unwrap();
        assert!(matches!(apply_ptq(&m, spec, &st), Err(Error::Calibration(_))));
    }

    #[test]
    fn ptq_int8_deviation_bounded_and_nonzero() {
        let m = Model::new(EncoderConfig::tiny(), 3).unwrap();
        let w = windows();
        let st = calibrate(&m, &w).unwrap();
        let q = apply_ptq(&m, QuantSpec::new(8, 8, QuantMode::Ptq).unwrap(), &st).unwrap();
        assert_eq!(q.params, m.params, "PTQ must not modify parameters");
        let a = m.predict(&w[0]).unwrap();
        let b = q.predict(&w[0]).unwrap();
        let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(dev > 0.0 && dev < 0.1, "{dev}");
    }

    #[test]
    fn packed_size_ratios() {
        let m = Model::new(EncoderConfig::tiny(), 0).unwrap();
        let p8 = packed_size_bytes(&m, &QuantSpec::new(8, 8, QuantMode::Ptq).unwrap()).unwrap();
        assert_eq!(p8.weight_packed_bytes * 4, p8.weight_fp32_bytes);
        assert_eq!(p8.fp32_bytes, p8.weight_fp32_bytes + p8.fp32_rest_bytes);
        let p2 = packed_size_bytes(&m, &QuantSpec::new(2, 8, QuantMode::Ptq).unwrap()).unwrap();
        assert!(p2.weight_packed_bytes * 16 >= p2.weight_fp32_bytes);
        assert!(p2.total_bytes < p8.total_bytes);
    }

    #[test]
    fn zero_epoch_qat_equals_ptq() {
        let m = Model::new(EncoderConfig::tiny(), 4).unwrap();
        let d = labeled_task(&TaskSpec { windows: 4, window_s: 1.0, seed: 5, ..TaskSpec::default() }).unwrap();
        let spec = QuantSpec::new(4, 8, QuantMode::Ptq).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = qat_finetune(&m, spec, &d, &d, &cfg, &mut TrainLog::new()).unwrap();
        let ptq = apply_ptq(&m, spec, &calibrate(&m, &d.windows).unwrap()).unwrap();
        assert_eq!(out.model.params, ptq.params);
        assert_eq!(out.model.quant.as_ref().unwrap().act_ranges, ptq.quant.as_ref().unwrap().act_ranges);
        assert_eq!(out.model.predict(&d.windows[0]).unwrap(), ptq.predict(&d.windows[0]).unwrap());
    }
}
