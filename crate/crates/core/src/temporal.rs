//! Temporal Transformer over the patch-major latent sequence with rotary positions.
//!
//! All queries of one patch share that patch's position, so the set of queries
//! stays unordered while patches are ordered in time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Session};
use crate::numerics::{kernels, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub base: f64,
    pub dim: usize,
}

impl RopeParams {
    pub fn new(base: f64, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("rotary width must be even, got {dim}")));
        }
        Ok(Self { base, dim })
    }

    /// `θᵢ = base^(−2i/dim)` for `i < dim/2`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.dim / 2).map(|i| self.base.powf(-2.0 * i as f64 / self.dim as f64)).collect()
    }
}

/// Depth and width of the temporal stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl TemporalConfig {
    pub fn from_encoder(c: &EncoderConfig) -> Self {
        Self { layers: c.temporal_layers, heads: c.heads, d_model: c.d_model, ffn_width: c.ffn_width(), dropout: c.dropout }
    }

    pub fn rope(&self, base: f64) -> Result<RopeParams> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        RopeParams::new(base, self.d_model / self.heads)
    }
}

/// Rotate each consecutive pair of the last axis by `position·θᵢ`.
pub fn rope_rotate(x: &Tensor, position: f64, p: &RopeParams) -> Result<Tensor> {
    let dim = x.last_dim();
    if dim != p.dim || dim % 2 != 0 {
        return Err(Error::Config(format!("rope: last axis {dim} does not match even width {}", p.dim)));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(dim) {
        kernels::rope_rotate_row(row, position, p.base, 1.0);
    }
    Ok(out)
}

/// Position of every slot of the patch-major sequence `[P·Q]`.
pub fn slot_positions(p: usize, q: usize, offset: f64) -> Vec<f64> {
    (0..p * q).map(|i| (i / q) as f64 + offset).collect()
}

/// `L` pre-norm layers of bidirectional RoPE attention and feed-forward over
/// latents `[P·Q, D]`. With `L = 0` the input is returned unchanged.
pub fn temporal_forward(s: &mut Session, latent: Var, p: usize, q: usize, pos_offset: f64) -> Result<Var> {
    let layers = s.config().temporal_layers;
    if layers == 0 {
        return Ok(latent);
    }
    let pos = slot_positions(p, q, pos_offset);
    let seq = p * q;
    let mut x = latent;
    for l in 0..layers {
        let pre = format!("temporal.{l}");
        let h = s.layer_norm(&format!("{pre}.attn_norm"), x)?;
        let (a, _) = s.attention(&format!("{pre}.attn"), h, h, 1, seq, seq, Some((&pos, &pos)))?;
        let a = s.dropout(a)?;
        x = s.g.add(x, a)?;
        let h = s.layer_norm(&format!("{pre}.ffn_norm"), x)?;
        let h = s.ffn(&format!("{pre}.ffn"), h)?;
        let h = s.dropout(h)?;
        x = s.g.add(x, h)?;
    }
    s.layer_norm("temporal.norm_out", x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn rope_identity_norm_and_relative_position() {
        let p = RopeParams::new(10_000.0, 8).unwrap();
        let x = random(&[8], 1);
        assert_eq!(rope_rotate(&x, 0.0, &p).unwrap(), x);
        let r = rope_rotate(&x, 7.0, &p).unwrap();
        assert!((dot(&r, &r).sqrt() - dot(&x, &x).sqrt()).abs() < 1e-6);
        let (q, k) = (random(&[8], 2), random(&[8], 3));
        let lhs = dot(&rope_rotate(&q, 4.0, &p).unwrap(), &rope_rotate(&k, 9.0, &p).unwrap());
        let rhs = dot(&rope_rotate(&q, 9.0, &p).unwrap(), &rope_rotate(&k, 14.0, &p).unwrap());
        assert!((lhs - rhs).abs() < 1e-5);
        assert!(matches!(RopeParams::new(1e4, 7), Err(Error::Config(_))));
        assert!(rope_rotate(&random(&[6], 1), 1.0, &p).is_err());
    }

    fn run(m: &Model, x: &Tensor, p: usize, offset: f64) -> Tensor {
        let mut s = m.session();
        let v = s.g.constant(x.clone());
        let y = temporal_forward(&mut s, v, p, m.config.num_queries, offset).unwrap();
        s.g.value(y).clone()
    }

    #[test]
    fn shape_and_empty_stack() {
        let cfg = EncoderConfig { d_model: 128, temporal_layers: 1, ..EncoderConfig::default() };
        let m = Model::new(cfg, 0).unwrap();
        let x = random(&[40 * 4, 128], 4);
        assert_eq!(run(&m, &x, 40, 0.0).shape(), &[160, 128]);
        let m0 = Model::new(EncoderConfig { temporal_layers: 0, ..EncoderConfig::tiny() }, 0).unwrap();
        let x = random(&[12, 16], 5);
        assert_eq!(run(&m0, &x, 3, 0.0), x);
    }

    #[test]
    fn position_shift_invariance() {
        let m = Model::new(EncoderConfig { temporal_layers: 2, ..EncoderConfig::tiny() }, 8).unwrap();
        let x = random(&[6 * 4, 16], 6);
        let a = run(&m, &x, 6, 0.0);
        let b = run(&m, &x, 6, 3.0);
        assert!(a.max_abs_diff(&b) < 1e-5);
        assert_eq!(run(&m, &x, 6, 0.0), a, "deterministic");
    }

    #[test]
    fn gradient_through_temporal_stack() {
        let m = Model::new(EncoderConfig::tiny(), 2).unwrap();
        let x = random(&[3 * 4, 16], 7);
        let r = crate::model::check_param_gradients(
            &m,
            &[("temporal.0.attn.q.weight", Some(vec![0, 17, 100, 255])), ("temporal.0.ffn.fc1.weight", Some(vec![3, 40, 200]))],
            |s| {
                let v = s.g.constant(x.clone());
                let y = temporal_forward(s, v, 3, 4, 0.0)?;
                let w = s.g.constant(random(&[12, 16], 9));
                let y = s.g.mul(y, w)?;
                Ok(s.g.sum(y))
            },
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
