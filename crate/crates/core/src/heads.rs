//! Task heads: masked-patch reconstruction, aggregation-query classification,
//! and low-rank adapters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Session};
use crate::numerics::{Tensor, Var};
use crate::patch_embed::channel_positions;
use crate::sigproc::{ChannelMeta, PATCH_LEN};

/// Which `(channel, patch)` cells are hidden during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Row-major `[C × P]`.
    pub mask: Vec<bool>,
    pub channels: usize,
    pub patches: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, c: usize, p: usize) -> bool {
        self.mask[c * self.patches + p]
    }
}

/// Hide `max(1, round(ratio·C·P))` cells chosen uniformly without replacement.
pub fn make_mask(channels: usize, patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let n = channels * patches;
    let k = ((ratio * n as f64).round() as usize).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mask = vec![false; n];
    for &i in idx.iter().take(k.min(n)) {
        mask[i] = true;
    }
    Ok(MaskPlan { mask, channels, patches, ratio, seed })
}

/// Decoder: per-channel queries built from the channel's positional code and
/// sensor type attend to the `Q` latents of the matching patch; a linear map
/// emits 32 samples. Returns `[C·P, 32]` (channel-major).
pub fn reconstruct(s: &mut Session, latent: Var, meta: &[ChannelMeta], patches: usize) -> Result<Var> {
    let cfg = s.config().clone();
    let (c, q, d) = (meta.len(), cfg.num_queries, cfg.d_model);
    let rows = s.g.shape(latent)[0];
    if rows != patches * q {
        return Err(Error::Dimension(format!("latent has {rows} rows, expected {patches}×{q}")));
    }
    if c == 0 {
        return Err(Error::EmptyInput);
    }
    let pos = s.g.constant(channel_positions(meta, d)?);
    let table = s.param("patch.sensor_type")?;
    let idx: Vec<usize> = meta.iter().map(|m| m.modality.index()).collect();
    let sensor = s.g.gather_rows(table, &idx)?;
    let dq = s.g.add(pos, sensor)?;
    let dq = s.linear("decoder.query_proj", dq)?;
    let kv = s.layer_norm("decoder.norm_kv", latent)?;
    let (h, _) = s.attention("decoder.attn", dq, kv, patches, c, q, None)?;
    let h = s.layer_norm("decoder.norm_out", h)?;
    let y = s.linear("decoder.out", h)?;
    let y = s.g.reshape(y, &[patches, c, PATCH_LEN])?;
    let y = s.g.permute(y, &[1, 0, 2])?;
    s.g.reshape(y, &[c * patches, PATCH_LEN])
}

/// Mean squared error over masked cells only. `pred` is `[C·P, 32]`.
pub fn masked_mse(s: &mut Session, pred: Var, target: &Tensor, plan: &MaskPlan) -> Result<Var> {
    let count = plan.count();
    if count == 0 {
        return Err(Error::UndefinedLoss);
    }
    let shape = s.g.shape(pred).to_vec();
    if shape != [plan.mask.len(), PATCH_LEN] || target.numel() != plan.mask.len() * PATCH_LEN {
        return Err(Error::Dimension(format!(
            "masked_mse: pred {shape:?}, target {:?}, mask {}",
            target.shape(),
            plan.mask.len()
        )));
    }
    let w = 1.0 / (count * PATCH_LEN) as f64;
    let weights: Vec<f64> = plan.mask.iter().flat_map(|&m| [if m { w } else { 0.0 }; PATCH_LEN]).collect();
    let t = s.g.constant(target.clone().reshape(&shape)?);
    let diff = s.g.sub(pred, t)?;
    let sq = s.g.mul(diff, diff)?;
    let wv = s.g.constant(Tensor::new(shape, weights)?);
    let weighted = s.g.mul(sq, wv)?;
    Ok(s.g.sum(weighted))
}

/// Output of the aggregation head.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[1, K]`.
    pub logits: Var,
    /// Attention-pooled vector `[1, D]` before the output norm.
    pub pooled: Var,
    /// Attention weights `[H, 1, P·Q]`.
    pub probs: Var,
}

/// A single learned query attends over all `P·Q` latents; the pooled vector is
/// normalised and mapped to class logits.
pub fn aggregate_and_classify(s: &mut Session, latent: Var, patches: usize, q: usize) -> Result<HeadOutput> {
    let n = patches * q;
    if s.g.shape(latent)[0] != n {
        return Err(Error::Dimension(format!("latent rows {} != {patches}×{q}", s.g.shape(latent)[0])));
    }
    let query = s.param("head.agg_query")?;
    let kv = s.layer_norm("head.norm_kv", latent)?;
    let (pooled, probs) = s.attention("head.attn", query, kv, 1, 1, n, None)?;
    let h = s.layer_norm("head.norm_out", pooled)?;
    let logits = s.linear("head.classifier", h)?;
    Ok(HeadOutput { logits, pooled, probs })
}

/// Trainable parameter count of the classification head for a config.
pub struct ClassifierHead;

impl ClassifierHead {
    pub fn num_params(c: &EncoderConfig) -> usize {
        let d = c.d_model;
        // query + two norms + attention (4 linear D→D) + classifier
        d + 4 * d + 4 * (d * d + d) + c.num_classes * (d + 1)
    }
}

/// Low-rank update `W + α/r · B·A` for a frozen weight `W[d_out, d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[r, d_in]`.
    pub a: Tensor,
    /// `[d_out, r]`, zero at initialisation.
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Tensor::new(vec![rank, d_in], (0..rank * d_in).map(|_| rng.gen_range(-bound..=bound)).collect())?;
        Ok(Self { a, b: Tensor::zeros(&[d_out, rank]), alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `r·(d_in + d_out)`.
    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

fn matmul_t(x: &Tensor, w: &Tensor) -> Tensor {
    // x[n, k] · w[m, k]ᵀ
    let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut out = vec![0.0; n * m];
    crate::numerics::kernels::gemm(x.data(), w.data(), n, k, m, false, true, &mut out);
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

/// `B·A`, the dense update an adapter represents.
pub fn lora_delta(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, d_in) = (a.shape()[0], a.shape()[1]);
    let (d_out, rb) = (b.shape()[0], b.shape()[1]);
    if r != rb {
        return Err(Error::Config(format!("LoRA rank mismatch: A has {r}, B has {rb}")));
    }
    let mut out = vec![0.0; d_out * d_in];
    crate::numerics::kernels::gemm(b.data(), a.data(), d_out, r, d_in, false, false, &mut out);
    Tensor::new(vec![d_out, d_in], out)
}

/// `y = x·Wᵀ + α/r · (x·Aᵀ)·Bᵀ` for row inputs `x[N, d_in]`.
pub fn lora_apply(w: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let r = adapter.rank();
    if adapter.a.shape() != [r, d_in] || adapter.b.shape() != [d_out, r] {
        return Err(Error::Config(format!(
            "adapter A{:?}/B{:?} incompatible with W[{d_out}, {d_in}]",
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    if x.rank() != 2 || x.shape()[1] != d_in {
        return Err(Error::Dimension(format!("input {:?} vs d_in {d_in}", x.shape())));
    }
    let mut y = matmul_t(x, w);
    let low = matmul_t(&matmul_t(x, &adapter.a), &adapter.b);
    let scale = adapter.alpha / r as f64;
    for (o, l) in y.data_mut().iter_mut().zip(low.data()) {
        *o += scale * l;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::sigproc::Modality;

    #[test]
    fn mask_is_reproducible_and_sized() {
        let a = make_mask(3, 40, 0.5, 7).unwrap();
        assert_eq!(a, make_mask(3, 40, 0.5, 7).unwrap());
        assert_eq!(a.count(), 60);
        let tiny = make_mask(3, 40, 1.0 / 120.0, 1).unwrap();
        assert_eq!(tiny.count(), 1);
        let mean: f64 = (0..100).map(|s| make_mask(3, 40, 0.5, s).unwrap().count() as f64 / 120.0).sum::<f64>() / 100.0;
        assert!((0.48..=0.52).contains(&mean));
        assert!(matches!(make_mask(3, 40, 1.0, 0), Err(Error::Config(_))));
        assert!(make_mask(3, 40, 0.0, 0).is_err());
    }

    fn plan(mask: Vec<bool>) -> MaskPlan {
        MaskPlan { channels: 1, patches: mask.len(), mask, ratio: 0.5, seed: 0 }
    }

    fn mse(pred: &Tensor, target: &Tensor, p: &MaskPlan) -> Result<f64> {
        let m = Model::new(EncoderConfig::tiny(), 0).unwrap();
        let mut s = m.session();
        let v = s.g.constant(pred.clone());
        let l = masked_mse(&mut s, v, target, p)?;
        Ok(s.g.value(l).data()[0])
    }

    #[test]
    fn masked_mse_examples() {
        let t = Tensor::new(vec![3, 32], (0..96).map(|i| i as f64 * 0.1).collect()).unwrap();
        let p = plan(vec![true, false, true]);
        assert_eq!(mse(&t, &t, &p).unwrap(), 0.0);
        let mut off = t.clone();
        off.data_mut()[32..64].iter_mut().for_each(|v| *v += 5.0);
        assert_eq!(mse(&off, &t, &p).unwrap(), 0.0);
        let mut plus = t.clone();
        for r in [0, 2] {
            plus.data_mut()[r * 32..(r + 1) * 32].iter_mut().for_each(|v| *v += 1.0);
        }
        assert!((mse(&plus, &t, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(mse(&t, &t, &plan(vec![false; 3])), Err(Error::UndefinedLoss)));
    }

    #[test]
    fn decoder_shape_and_channel_function() {
        let m = Model::new(EncoderConfig::tiny(), 3).unwrap();
        let meta: Vec<ChannelMeta> = (0..5)
            .map(|i| ChannelMeta {
                modality: if i < 3 { Modality::Eeg } else { Modality::Ecg },
                label: format!("c{i}"),
                coords: if i == 1 { [0.1, 0.2, 0.0] } else { [0.1 * i as f64, 0.0, 0.0] },
            })
            .collect();
        let p = 6;
        let mut s = m.session();
        let lat = s.g.constant(Tensor::new(vec![p * 4, 16], (0..p * 64).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap());
        let y = reconstruct(&mut s, lat, &meta, p).unwrap();
        assert_eq!(s.g.shape(y), &[5 * p, 32]);
        let mut meta2 = meta.clone();
        meta2[4] = meta2[3].clone();
        let y2 = reconstruct(&mut s, lat, &meta2, p).unwrap();
        let v = s.g.value(y2);
        assert_eq!(&v.data()[3 * p * 32..4 * p * 32], &v.data()[4 * p * 32..5 * p * 32]);
        assert!(matches!(reconstruct(&mut s, lat, &meta, p + 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooled_vector_invariant_to_duplicated_latents() {
        let m = Model::new(EncoderConfig::tiny(), 4).unwrap();
        let base: Vec<f64> = (0..3 * 4 * 16).map(|i| (i as f64 * 0.21).cos()).collect();
        let run = |data: Vec<f64>, p: usize| {
            let mut s = m.session();
            let lat = s.g.constant(Tensor::new(vec![p * 4, 16], data).unwrap());
            let out = aggregate_and_classify(&mut s, lat, p, 4).unwrap();
            let probs = s.g.value(out.probs).clone();
            (s.g.value(out.pooled).clone(), s.g.value(out.logits).clone(), probs)
        };
        let (pa, la, probs) = run(base.clone(), 3);
        assert_eq!(la.shape(), &[1, 5]);
        for h in probs.data().chunks(12) {
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut dup = base.clone();
        dup.extend_from_slice(&base);
        let (pb, _, _) = run(dup, 6);
        assert!(pa.max_abs_diff(&pb) < 1e-5);
    }

    #[test]
    fn head_width_matches_classes() {
        let m = Model::new(EncoderConfig { num_classes: 5, ..EncoderConfig::tiny() }, 0).unwrap();
        let mut s = m.session();
        let lat = s.g.constant(Tensor::full(&[8, 16], 0.3));
        let out = aggregate_and_classify(&mut s, lat, 2, 4).unwrap();
        assert_eq!(s.g.shape(out.logits), &[1, 5]);
        let head: usize = m.params.iter().filter(|(_, p)| p.group == crate::model::Group::Head).map(|(_, p)| p.value.numel()).sum();
        assert_eq!(head, ClassifierHead::num_params(&m.config));
    }

    #[test]
    fn lora_zero_init_and_alpha_zero() {
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.3, -0.2, 0.9, 0.1, 1.0, 0.0, -1.0, 0.5]).unwrap();
        let ad = LoraAdapter::new(4, 3, 2, 16.0, 1).unwrap();
        assert_eq!(lora_apply(&w, &ad, &x).unwrap(), matmul_t(&x, &w));
        let mut trained = ad.clone();
        trained.b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 * i as f64);
        trained.alpha = 0.0;
        assert_eq!(lora_apply(&w, &trained, &x).unwrap(), matmul_t(&x, &w));
        assert_eq!(ad.num_params(), 2 * (4 + 3));
        let bad = LoraAdapter { a: Tensor::zeros(&[2, 4]), b: Tensor::zeros(&[3, 3]), alpha: 1.0 };
        assert!(matches!(lora_apply(&w, &bad, &x), Err(Error::Config(_))));
        // merged form agrees with the two-path form
        trained.alpha = 4.0;
        let delta = lora_delta(&trained.a, &trained.b).unwrap();
        let merged = w.zip_map(&delta, |a, d| a + 2.0 * d);
        assert!(lora_apply(&w, &trained, &x).unwrap().max_abs_diff(&matmul_t(&x, &merged)) < 1e-12);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let m = Model::new(EncoderConfig::tiny(), 9).unwrap();
        let meta: Vec<ChannelMeta> = (0..2)
            .map(|i| ChannelMeta { modality: Modality::ALL[i], label: String::new(), coords: [0.2 * i as f64, 0.1, 0.0] })
            .collect();
        let p = 3;
        let lat = Tensor::new(vec![p * 4, 16], (0..p * 64).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let target = Tensor::new(vec![2 * p, 32], (0..2 * p * 32).map(|i| (i as f64 * 0.05).cos()).collect()).unwrap();
        let plan = make_mask(2, p, 0.5, 3).unwrap();
        let r = crate::model::check_param_gradients(
            &m,
            &[("decoder.out.weight", Some(vec![0, 33, 200, 511])), ("decoder.attn.k.weight", Some(vec![1, 77, 250])), ("decoder.query_proj.bias", None)],
            |s| {
                let l = s.g.constant(lat.clone());
                let y = reconstruct(s, l, &meta, p)?;
                masked_mse(s, y, &target, &plan)
            },
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
