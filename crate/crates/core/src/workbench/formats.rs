//! On-disk formats: BSR recordings and model checkpoints.
//!
//! Both are a JSON text part plus a raw little-endian binary part, written
//! atomically (temporary file in the same directory, then rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Group, Model, ParamKind};
use crate::numerics::Tensor;
use crate::quant::QuantState;
use crate::sigproc::{Channel, Modality, MultimodalRecord};

pub const BSR_FORMAT: &str = "bsr";
pub const CKPT_FORMAT: &str = "biofuse-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Write `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Sidecar path of a BSR payload: same stem, `.json` extension.
pub fn bsr_sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsrChannel {
    pub label: String,
    pub modality: Modality,
    pub coords: [f64; 3],
}

/// JSON sidecar of a BSR recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsrHeader {
    pub format: String,
    pub version: u32,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub duration_s: f64,
    pub channels: Vec<BsrChannel>,
}

/// Encode a record into (sidecar JSON, payload). Samples are stored as f32,
/// channel-major.
pub fn encode_bsr(rec: &MultimodalRecord) -> Result<(String, Vec<u8>)> {
    rec.validate()?;
    let header = BsrHeader {
        format: BSR_FORMAT.into(),
        version: FORMAT_VERSION,
        sample_rate_hz: rec.sample_rate_hz,
        n_samples: rec.len(),
        duration_s: rec.duration_s(),
        channels: rec
            .channels
            .iter()
            .map(|c| BsrChannel { label: c.label.clone(), modality: c.modality, coords: c.coords })
            .collect(),
    };
    let mut payload = Vec::with_capacity(4 * rec.len() * rec.channels.len());
    for c in &rec.channels {
        for &v in &c.samples {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok((serde_json::to_string_pretty(&header)? + "\n", payload))
}

pub fn decode_bsr(sidecar: &str, payload: &[u8]) -> Result<MultimodalRecord> {
    let h: BsrHeader = serde_json::from_str(sidecar)?;
    if h.format != BSR_FORMAT || h.version != FORMAT_VERSION {
        return Err(Error::Format(format!("not a version-{FORMAT_VERSION} BSR sidecar: {} v{}", h.format, h.version)));
    }
    let expected = 4 * h.n_samples * h.channels.len();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, sidecar implies {} channels × {} samples × 4 = {expected}",
            payload.len(),
            h.channels.len(),
            h.n_samples
        )));
    }
    let mut chunks = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let channels = h
        .channels
        .into_iter()
        .map(|c| Channel {
            modality: c.modality,
            label: c.label,
            coords: c.coords,
            samples: chunks.by_ref().take(h.n_samples).collect(),
        })
        .collect();
    let rec = MultimodalRecord { channels, sample_rate_hz: h.sample_rate_hz };
    rec.validate()?;
    Ok(rec)
}

/// Write `path` (payload) and its `.json` sidecar.
pub fn write_bsr(path: &Path, rec: &MultimodalRecord) -> Result<()> {
    let (sidecar, payload) = encode_bsr(rec)?;
    write_atomic(path, &payload)?;
    write_atomic(&bsr_sidecar(path), sidecar.as_bytes())
}

pub fn read_bsr(path: &Path) -> Result<MultimodalRecord> {
    let sidecar = String::from_utf8(read(&bsr_sidecar(path))?).map_err(|e| Error::Format(e.to_string()))?;
    decode_bsr(&sidecar, &read(path)?)
}

/// Directory entry for one tensor in the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
    pub group: Group,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    #[serde(default)]
    pub quant: Option<QuantState>,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path of a checkpoint: same stem, `.blob` extension.
pub fn checkpoint_blob(path: &Path) -> PathBuf {
    path.with_extension("blob")
}

/// Encode a model into (manifest JSON, blob of little-endian f64).
pub fn encode_checkpoint(model: &Model) -> Result<(String, Vec<u8>)> {
    let mut blob = Vec::with_capacity(8 * model.params.numel());
    let mut tensors = Vec::with_capacity(model.params.len());
    for (name, p) in model.params.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            nbytes: blob.len() - offset,
            group: p.group,
            kind: p.kind,
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        format: CKPT_FORMAT.into(),
        version: FORMAT_VERSION,
        config: model.config.clone(),
        quant: model.quant.clone(),
        tensors,
    };
    Ok((serde_json::to_string_pretty(&manifest)? + "\n", blob))
}

/// Decode a checkpoint. The tensor directory must name exactly the parameters
/// the config implies (plus adapters, if any are present).
pub fn decode_checkpoint(manifest: &str, blob: &[u8]) -> Result<Model> {
    let m: CheckpointManifest = serde_json::from_str(manifest)?;
    if m.format != CKPT_FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("not a version-{FORMAT_VERSION} checkpoint: {} v{}", m.format, m.version)));
    }
    let mut model = Model::new(m.config.clone(), 0)?;
    if m.tensors.iter().any(|t| t.group == Group::Lora) {
        model.attach_lora(0)?;
    }
    for t in &m.tensors {
        if !model.params.contains(&t.name) {
            return Err(Error::Format(format!("unknown tensor `{}`", t.name)));
        }
    }
    if m.tensors.len() != model.params.len() {
        let listed: std::collections::HashSet<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
        let missing: Vec<&String> = model.params.iter().map(|(n, _)| n).filter(|n| !listed.contains(n.as_str())).collect();
        return Err(Error::Format(format!("checkpoint is missing tensors {missing:?} (or lists duplicates)")));
    }
    // rebuild in manifest order so save → load → save is byte-identical
    let mut rebuilt = crate::model::ParamStore::default();
    for t in &m.tensors {
        let p = model.params.get(&t.name).expect("checked above");
        if t.dtype != "f64" {
            return Err(Error::Format(format!("tensor `{}`: unsupported dtype {}", t.name, t.dtype)));
        }
        if t.shape != p.value.shape() || (t.group, t.kind) != (p.group, p.kind) {
            return Err(Error::Format(format!("tensor `{}`: entry does not match the config", t.name)));
        }
        let n: usize = t.shape.iter().product();
        let end = t.offset.checked_add(t.nbytes).filter(|&e| e <= blob.len() && t.nbytes == 8 * n);
        let Some(end) = end else {
            return Err(Error::Format(format!("tensor `{}`: byte range out of bounds", t.name)));
        };
        let data = blob[t.offset..end].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        rebuilt.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.group, t.kind);
        rebuilt.get_mut(&t.name).unwrap().trainable = t.trainable;
    }
    if let Some(q) = &m.quant {
        q.spec.validate()?;
    }
    model.params = rebuilt;
    model.quant = m.quant;
    Ok(model)
}

/// Write the manifest to `path` and tensors to its `.blob` sibling.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let (manifest, blob) = encode_checkpoint(model)?;
    write_atomic(&checkpoint_blob(path), &blob)?;
    write_atomic(path, manifest.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let manifest = String::from_utf8(read(path)?).map_err(|e| Error::Format(e.to_string()))?;
    decode_checkpoint(&manifest, &read(&checkpoint_blob(path))?)
}
