//! Export of per-patch query-over-channel attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::sigproc::{ChannelMeta, Modality, PatchGrid};

pub const CSV_HEADER: &str = "patch,query,modality,score";

/// Head-averaged attention of one query at one patch, averaged over the
/// channels of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub patch: usize,
    pub query: usize,
    pub modality: Modality,
    pub score: f64,
}

/// Collapse attention `[P, Q, C]` to one row per (patch, query, modality present).
pub fn attention_rows(attn: Option<&Tensor>, meta: &[ChannelMeta]) -> Result<Vec<AttentionRow>> {
    let attn = attn.ok_or_else(|| Error::Config("no attention retained: run a forward pass through the unifier first".into()))?;
    let s = attn.shape();
    if s.len() != 3 || s[2] != meta.len() {
        return Err(Error::Dimension(format!("attention {s:?} does not match {} channels", meta.len())));
    }
    let (p, q, c) = (s[0], s[1], s[2]);
    let mut present: Vec<Modality> = meta.iter().map(|m| m.modality).collect();
    present.sort();
    present.dedup();
    let mut rows = Vec::with_capacity(p * q * present.len());
    for pi in 0..p {
        for qi in 0..q {
            let scores = &attn.data()[(pi * q + qi) * c..(pi * q + qi + 1) * c];
            for &m in &present {
                let (sum, n) = scores
                    .iter()
                    .zip(meta)
                    .filter(|(_, cm)| cm.modality == m)
                    .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
                rows.push(AttentionRow { patch: pi, query: qi, modality: m, score: sum / n as f64 });
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AttentionRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.patch, r.query, r.modality, r.score));
    }
    out
}

/// Run the encoder on one window and return its attention table as CSV.
pub fn dump_attention(model: &Model, grid: &PatchGrid) -> Result<String> {
    let mut s = model.session();
    model.encode(&mut s, grid, None)?;
    Ok(rows_to_csv(&attention_rows(s.unifier_attn.as_ref(), &grid.meta)?))
}
