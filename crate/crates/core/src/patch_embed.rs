//! Patch tokens: conv and spectral features of each 32-sample patch, plus a
//! fixed positional code of the channel location and a learned sensor-type row.

use std::f64::consts::PI;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::MaskPlan;
use crate::model::{EncoderConfig, Model, Session};
use crate::numerics::{Tensor, Var};
use crate::sigproc::{ChannelMeta, Modality, PatchGrid, PATCH_LEN};

pub const CONV1_KERNEL: usize = 7;
pub const CONV2_KERNEL: usize = 5;
const CONV_STRIDE: usize = 2;
/// Length after the two stride-2 convolutions.
pub const CONV_OUT_LEN: usize = PATCH_LEN / (CONV_STRIDE * CONV_STRIDE);
/// Real-FFT bins of a 32-sample patch.
pub const FFT_BINS: usize = PATCH_LEN / 2 + 1;
/// Spatial frequencies span six octaves from π.
const POS_MAX_RATIO: f64 = 64.0;

/// Width of the concatenated conv ‖ spectrum feature before projection.
pub fn feature_width(c: &EncoderConfig) -> usize {
    c.conv_channels[1] * CONV_OUT_LEN + FFT_BINS
}

/// Fixed sinusoidal code of a 3-D location.
///
/// Each axis gets `D/6` bands with angular frequencies `π·64^(k/nb)`; axis `a`,
/// band `k` occupies `[sin, cos]` at index `2·(a·nb + k)`. Any remainder of `D`
/// not divisible by 6 is zero.
pub fn positional_encoding(coords: [f64; 3], d: usize) -> Vec<f64> {
    let nb = d / 6;
    let mut out = vec![0.0; d];
    for (a, &x) in coords.iter().enumerate() {
        for k in 0..nb {
            let w = PI * POS_MAX_RATIO.powf(k as f64 / nb as f64);
            let i = 2 * (a * nb + k);
            out[i] = (w * x).sin();
            out[i + 1] = (w * x).cos();
        }
    }
    out
}

/// Angle (degrees) and radius of one ECG lead in the shared plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadAngle {
    pub angle_deg: f64,
    #[serde(default = "unit_radius")]
    pub radius: f64,
}

fn unit_radius() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LeadEntry {
    Degrees(f64),
    Full(LeadAngle),
}

pub const STANDARD_LEADS: [&str; 12] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];

/// Radius of the precordial ring, which shares the plane with the limb leads.
pub const PRECORDIAL_RADIUS: f64 = 0.5;

/// Per-lead angles mapping ECG leads into the coordinate space used for EEG electrodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeadAngleTable {
    leads: IndexMap<String, LeadAngle>,
}

impl Default for LeadAngleTable {
    /// Hexaxial limb leads on the unit circle, V1–V6 on an inner ring.
    fn default() -> Self {
        let limb = [0.0, 60.0, 120.0, -150.0, -30.0, 90.0];
        let chest = [-15.0, 0.0, 15.0, 30.0, 45.0, 60.0];
        let mut leads = IndexMap::new();
        for (name, deg) in STANDARD_LEADS[..6].iter().zip(limb) {
            leads.insert(name.to_string(), LeadAngle { angle_deg: deg, radius: 1.0 });
        }
        for (name, deg) in STANDARD_LEADS[6..].iter().zip(chest) {
            leads.insert(name.to_string(), LeadAngle { angle_deg: deg, radius: PRECORDIAL_RADIUS });
        }
        Self { leads }
    }
}

impl LeadAngleTable {
    /// Parse `{"I": 0, "V1": {"angle_deg": -15, "radius": 0.5}, ...}`.
    /// Leads not listed keep their default entry.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: IndexMap<String, LeadEntry> = serde_json::from_str(text)?;
        let mut table = Self::default();
        for (name, entry) in raw {
            let Some(slot) = table.leads.get_mut(&name) else {
                return Err(Error::UnknownLead(name));
            };
            *slot = match entry {
                LeadEntry::Degrees(d) => LeadAngle { angle_deg: d, radius: slot.radius },
                LeadEntry::Full(a) => a,
            };
        }
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.leads.len() != STANDARD_LEADS.len() {
            return Err(Error::Config(format!("lead table needs 12 entries, has {}", self.leads.len())));
        }
        for (n, a) in &self.leads {
            if !(-180.0..180.0).contains(&a.angle_deg) {
                return Err(Error::Config(format!("lead {n}: angle {} outside [-180, 180)", a.angle_deg)));
            }
            if !(a.radius > 0.0 && a.radius <= 1.0) {
                return Err(Error::Config(format!("lead {n}: radius {} outside (0, 1]", a.radius)));
            }
        }
        Ok(())
    }

    pub fn get(&self, lead: &str) -> Result<LeadAngle> {
        self.leads.get(lead).copied().ok_or_else(|| Error::UnknownLead(lead.to_string()))
    }

    /// `(r·cos θ, r·sin θ, 0)`.
    pub fn coordinates(&self, lead: &str) -> Result<[f64; 3]> {
        let a = self.get(lead)?;
        let t = a.angle_deg.to_radians();
        Ok([a.radius * t.cos(), a.radius * t.sin(), 0.0])
    }
}

/// Coordinates of a standard lead under the default table.
pub fn ecg_lead_coordinates(lead: &str) -> Result<[f64; 3]> {
    LeadAngleTable::default().coordinates(lead)
}

/// Read-only view of the learned per-modality rows.
#[derive(Debug, Clone, Copy)]
pub struct SensorTypeTable<'a> {
    pub embeddings: &'a Tensor,
}

impl<'a> SensorTypeTable<'a> {
    pub fn of(model: &'a Model) -> Result<Self> {
        Ok(Self { embeddings: model.params.tensor("patch.sensor_type")? })
    }

    pub fn row(&self, m: Modality) -> &'a [f64] {
        self.embeddings.row(m.index())
    }
}

/// One embedded patch entering the unifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchToken {
    pub vector: Vec<f64>,
    pub channel_index: usize,
    pub patch_index: usize,
    pub modality: Modality,
}

/// Feature path for a batch of patches `[N, 32] → [N, D]`.
pub fn encode_patches(s: &mut Session, patches: Var) -> Result<Var> {
    let shape = s.g.shape(patches).to_vec();
    if shape.len() != 2 || shape[1] != PATCH_LEN {
        return Err(Error::Dimension(format!("patches must be [N, {PATCH_LEN}], got {shape:?}")));
    }
    let n = shape[0];
    let [c1, c2] = s.config().conv_channels;

    let x = s.g.reshape(patches, &[n, PATCH_LEN, 1])?;
    let cols = s.g.im2col(x, CONV1_KERNEL, CONV_STRIDE, CONV1_KERNEL / 2)?;
    let h = s.linear("patch.conv1", cols)?;
    let h = s.g.gelu(h);
    let h = s.g.reshape(h, &[n, PATCH_LEN / CONV_STRIDE, c1])?;
    let cols = s.g.im2col(h, CONV2_KERNEL, CONV_STRIDE, CONV2_KERNEL / 2)?;
    let h = s.linear("patch.conv2", cols)?;
    let h = s.g.gelu(h);
    let conv = s.g.reshape(h, &[n, CONV_OUT_LEN * c2])?;

    let spec = s.g.rfft_mag(patches)?;
    let feat = s.g.concat(&[conv, spec], 1)?;
    s.linear("patch.proj", feat)
}

/// Feature vector of a single patch (evaluation mode).
pub fn encode_patch(model: &Model, patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() != PATCH_LEN {
        return Err(Error::Dimension(format!("patch length {} != {PATCH_LEN}", patch.len())));
    }
    let mut s = model.session();
    let x = s.g.constant(Tensor::new(vec![1, PATCH_LEN], patch.to_vec())?);
    let y = encode_patches(&mut s, x)?;
    Ok(s.g.value(y).data().to_vec())
}

/// `encode_patch(patch) + positional_encoding(coords) + sensor_type[modality]`.
pub fn compose_token(
    model: &Model,
    patch: &[f64],
    coords: [f64; 3],
    modality: Modality,
    channel_index: usize,
    patch_index: usize,
) -> Result<PatchToken> {
    let feat = encode_patch(model, patch)?;
    let pos = positional_encoding(coords, model.config.d_model);
    let sensor = SensorTypeTable::of(model)?.row(modality);
    let vector = feat.iter().zip(&pos).zip(sensor).map(|((f, p), t)| f + p + t).collect();
    Ok(PatchToken { vector, channel_index, patch_index, modality })
}

/// Positional codes of every channel, `[C, D]`.
pub fn channel_positions(meta: &[ChannelMeta], d: usize) -> Result<Tensor> {
    let data: Vec<f64> = meta.iter().flat_map(|m| positional_encoding(m.coords, d)).collect();
    Tensor::new(vec![meta.len(), d], data)
}

/// Embed every cell of a grid into tokens `[C·P, D]` (channel-major, row `c·P + p`).
/// Masked cells have their patch feature replaced by the learned mask token.
pub fn embed_grid(s: &mut Session, grid: &PatchGrid, mask: Option<&MaskPlan>) -> Result<Var> {
    let (c, p) = grid.dims();
    if c == 0 {
        return Err(Error::EmptyInput);
    }
    let d = s.config().d_model;
    let patches = s.g.constant(grid.values.clone().reshape(&[c * p, PATCH_LEN])?);
    let mut feat = encode_patches(s, patches)?;
    if let Some(plan) = mask {
        if plan.channels != c || plan.patches != p {
            return Err(Error::Dimension(format!(
                "mask plan is {}×{}, grid is {c}×{p}",
                plan.channels, plan.patches
            )));
        }
        let token = s.param("patch.mask_token")?;
        feat = s.g.where_rows(feat, token, &plan.mask)?;
    }
    let pos = channel_positions(&grid.meta, d)?;
    let pos_rows: Vec<f64> = (0..c).flat_map(|ci| (0..p).flat_map(|_| pos.row(ci).iter().copied()).collect::<Vec<_>>()).collect();
    let pos = s.g.constant(Tensor::new(vec![c * p, d], pos_rows)?);
    let table = s.param("patch.sensor_type")?;
    let idx: Vec<usize> = grid.meta.iter().flat_map(|m| std::iter::repeat(m.modality.index()).take(p)).collect();
    let sensor = s.g.gather_rows(table, &idx)?;
    let x = s.g.add(feat, pos)?;
    s.g.add(x, sensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels;

    fn model() -> Model {
        Model::new(EncoderConfig::tiny(), 5).unwrap()
    }

    #[test]
    fn zero_patches_give_identical_outputs() {
        let m = model();
        let a = encode_patch(&m, &[0.0; 32]).unwrap();
        let b = encode_patch(&m, &[0.0; 32]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let d = Model::new(EncoderConfig { d_model: 128, ..EncoderConfig::default() }, 0).unwrap();
        assert_eq!(encode_patch(&d, &[0.1; 32]).unwrap().len(), 128);
        assert!(matches!(encode_patch(&m, &[0.0; 31]), Err(Error::Dimension(_))));
    }

    #[test]
    fn time_reversal_keeps_spectrum_changes_conv() {
        let x: Vec<f64> = (0..32).map(|i| ((i * i) as f64 * 0.1).sin() + 0.05 * i as f64).collect();
        let mut r = x.clone();
        r.reverse();
        // reversal x[n] -> x[N-1-n] is a circular shift of x[-n], whose DFT is conj(X)·phase
        let (fa, fb) = (kernels::rfft_mag(&x).unwrap(), kernels::rfft_mag(&r).unwrap());
        for (a, b) in fa.iter().zip(&fb) {
            assert!((a - b).abs() < 1e-9);
        }
        // naive DFT magnitude agrees
        for (k, v) in fa.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, xv) in x.iter().enumerate() {
                let t = -2.0 * PI * (k * n) as f64 / 32.0;
                re += xv * t.cos();
                im += xv * t.sin();
            }
            assert!((re.hypot(im) - v).abs() < 1e-9);
        }
        let m = model();
        let conv = |p: &[f64]| {
            let mut s = m.session();
            let v = s.g.constant(Tensor::new(vec![1, 32], p.to_vec()).unwrap());
            let v = s.g.reshape(v, &[1, 32, 1]).unwrap();
            let c = s.g.im2col(v, CONV1_KERNEL, 2, 3).unwrap();
            let h = s.linear("patch.conv1", c).unwrap();
            s.g.value(h).clone()
        };
        assert!(conv(&x).max_abs_diff(&conv(&r)) > 1e-3);
    }

    #[test]
    fn positional_code_at_origin() {
        let d = 128;
        let code = positional_encoding([0.0; 3], d);
        let nb = d / 6;
        for i in 0..3 * nb {
            assert_eq!(code[2 * i], 0.0);
            assert_eq!(code[2 * i + 1], 1.0);
        }
        assert!(code[6 * nb..].iter().all(|&v| v == 0.0));
        let a = positional_encoding([0.3, -0.2, 0.5], d);
        let b = positional_encoding([0.3, -0.1, 0.5], d);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn lead_coordinates() {
        let i = ecg_lead_coordinates("I").unwrap();
        assert!((i[0] - 1.0).abs() < 1e-12 && i[1].abs() < 1e-12);
        let f = ecg_lead_coordinates("aVF").unwrap();
        assert!(f[0].abs() < 1e-12 && (f[1] - 1.0).abs() < 1e-12);
        assert!(matches!(ecg_lead_coordinates("V7"), Err(Error::UnknownLead(_))));
        let all: Vec<[f64; 3]> = STANDARD_LEADS.iter().map(|l| ecg_lead_coordinates(l).unwrap()).collect();
        for i in 0..12 {
            for j in i + 1..12 {
                let d: f64 = (0..3).map(|k| (all[i][k] - all[j][k]).powi(2)).sum();
                assert!(d > 1e-6, "{} vs {}", STANDARD_LEADS[i], STANDARD_LEADS[j]);
            }
        }
    }

    #[test]
    fn lead_table_json() {
        let t = LeadAngleTable::from_json(r#"{"I": 10, "V1": {"angle_deg": -20, "radius": 0.4}}"#).unwrap();
        assert_eq!(t.get("I").unwrap(), LeadAngle { angle_deg: 10.0, radius: 1.0 });
        assert_eq!(t.get("V1").unwrap().radius, 0.4);
        assert!(LeadAngleTable::from_json(r#"{"I": 180}"#).is_err());
        assert!(matches!(LeadAngleTable::from_json(r#"{"X": 1}"#), Err(Error::UnknownLead(_))));
    }

    #[test]
    fn token_composition_is_additive() {
        let m = model();
        let patch: Vec<f64> = (0..32).map(|i| (i as f64 * 0.4).cos()).collect();
        let coords = [0.2, 0.1, -0.3];
        let a = compose_token(&m, &patch, coords, Modality::Eeg, 0, 0).unwrap();
        let b = compose_token(&m, &patch, coords, Modality::Eeg, 1, 0).unwrap();
        assert_eq!(a.vector, b.vector);
        let e = compose_token(&m, &patch, coords, Modality::Ecg, 0, 0).unwrap();
        let t = SensorTypeTable::of(&m).unwrap();
        for i in 0..16 {
            let want = t.row(Modality::Eeg)[i] - t.row(Modality::Ecg)[i];
            assert!((a.vector[i] - e.vector[i] - want).abs() < 1e-12);
        }
        let feat = encode_patch(&m, &patch).unwrap();
        let pos = positional_encoding(coords, 16);
        for i in 0..16 {
            assert!((a.vector[i] - (feat[i] + pos[i] + t.row(Modality::Eeg)[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_patch_zero_tables_is_bias_only() {
        let mut m = model();
        for name in ["patch.sensor_type", "patch.proj.weight"] {
            m.params.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        m.params.get_mut("patch.proj.bias").unwrap().value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let t = compose_token(&m, &[0.0; 32], [0.0; 3], Modality::Ppg, 0, 0).unwrap();
        let pos = positional_encoding([0.0; 3], 16);
        for i in 0..16 {
            assert_eq!(t.vector[i] - pos[i], i as f64);
        }
    }
}
