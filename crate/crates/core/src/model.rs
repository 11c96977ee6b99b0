//! Encoder configuration, parameter storage and the forward session shared by all modules.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::{self, GradCheckReport};
use crate::numerics::{Graph, Tensor, Var};
use crate::quant::{activation_grid, weight_grid, CalibStats, QuantState};
use crate::sigproc::PatchGrid;
use crate::{heads, patch_embed, temporal, unifier};

/// Kind of supervision the classification head is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One class per window; softmax + cross-entropy.
    #[default]
    SingleLabel,
    /// Independent binary labels; per-class sigmoid + binary cross-entropy.
    MultiLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, alpha: 16.0 }
    }
}

/// Every hyperparameter of the shared encoder and its heads.
///
/// Unknown JSON keys are rejected; missing keys fall back to [`EncoderConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub unifier_depth: usize,
    pub temporal_layers: usize,
    pub ffn_mult: usize,
    pub conv_channels: [usize; 2],
    pub patch_len: usize,
    pub rope_base: f64,
    pub dropout: f64,
    pub ln_eps: f64,
    pub num_classes: usize,
    pub task: TaskKind,
    pub lora: LoraConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            num_queries: 4,
            heads: 4,
            unifier_depth: 1,
            temporal_layers: 5,
            ffn_mult: 4,
            conv_channels: [8, 16],
            patch_len: 32,
            rope_base: 10_000.0,
            dropout: 0.0,
            ln_eps: 1e-5,
            num_classes: 5,
            task: TaskKind::SingleLabel,
            lora: LoraConfig::default(),
        }
    }
}

impl EncoderConfig {
    /// Small configuration used for gradient checks and quick experiments.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            num_queries: 4,
            heads: 2,
            unifier_depth: 1,
            temporal_layers: 1,
            ffn_mult: 2,
            conv_channels: [4, 4],
            num_classes: 5,
            lora: LoraConfig { rank: 4, alpha: 4.0 },
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head width {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.num_queries == 0 || self.unifier_depth == 0 {
            return bad("need at least one query and one unification block".into());
        }
        if self.patch_len != 32 {
            return bad(format!("patch length is fixed at 32 samples, got {}", self.patch_len));
        }
        if self.conv_channels.contains(&0) || self.ffn_mult == 0 {
            return bad("conv channels and ffn_mult must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.lora.rank == 0 {
            return bad("LoRA rank must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PatchEmbed,
    Unifier,
    Temporal,
    Decoder,
    Head,
    Lora,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::PatchEmbed => "patch_embed",
            Group::Unifier => "unifier",
            Group::Temporal => "temporal",
            Group::Decoder => "decoder",
            Group::Head => "head",
            Group::Lora => "lora",
        }
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Group::PatchEmbed | Group::Unifier | Group::Temporal)
    }
}

/// Role of a tensor; only `Weight` tensors are eligible for weight quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
    LoraA,
    LoraB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: Group,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named parameters in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: Group, kind: ParamKind) {
        self.map.insert(name.into(), Param { value, group, kind, trainable: true });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.map.shift_remove(name)
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect()).unwrap()
    }
}

fn add_linear(p: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize, group: Group) {
    let bound = 1.0 / (d_in as f64).sqrt();
    p.insert(format!("{name}.weight"), init.uniform(&[d_out, d_in], bound), group, ParamKind::Weight);
    p.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]), group, ParamKind::Bias);
}

fn add_norm(p: &mut ParamStore, name: &str, d: usize, group: Group) {
    p.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0), group, ParamKind::Norm);
    p.insert(format!("{name}.beta"), Tensor::zeros(&[d]), group, ParamKind::Norm);
}

fn add_attention(p: &mut ParamStore, init: &mut Init, name: &str, d: usize, group: Group) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(p, init, &format!("{name}.{proj}"), d, d, group);
    }
}

fn add_ffn(p: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize, group: Group) {
    add_linear(p, init, &format!("{name}.fc1"), d, hidden, group);
    add_linear(p, init, &format!("{name}.fc2"), hidden, d, group);
}

/// The shared encoder with its reconstruction decoder and classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamStore,
    /// Present once the model has been quantized (PTQ or QAT).
    pub quant: Option<QuantState>,
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut p = ParamStore::default();
        let c = &config;
        let d = c.d_model;
        let [c1, c2] = c.conv_channels;

        add_linear(&mut p, &mut init, "patch.conv1", patch_embed::CONV1_KERNEL, c1, Group::PatchEmbed);
        add_linear(&mut p, &mut init, "patch.conv2", patch_embed::CONV2_KERNEL * c1, c2, Group::PatchEmbed);
        add_linear(&mut p, &mut init, "patch.proj", patch_embed::feature_width(c), d, Group::PatchEmbed);
        p.insert("patch.sensor_type", init.uniform(&[3, d], 0.5), Group::PatchEmbed, ParamKind::Embedding);
        p.insert("patch.mask_token", init.uniform(&[d], 0.5), Group::Decoder, ParamKind::Embedding);

        p.insert("unifier.queries", init.uniform(&[c.num_queries, d], 1.0), Group::Unifier, ParamKind::Embedding);
        for b in 0..c.unifier_depth {
            let pre = format!("unifier.{b}");
            add_norm(&mut p, &format!("{pre}.cross_norm_q"), d, Group::Unifier);
            add_norm(&mut p, &format!("{pre}.cross_norm_kv"), d, Group::Unifier);
            add_attention(&mut p, &mut init, &format!("{pre}.cross"), d, Group::Unifier);
            add_norm(&mut p, &format!("{pre}.self_norm"), d, Group::Unifier);
            add_attention(&mut p, &mut init, &format!("{pre}.self"), d, Group::Unifier);
            add_norm(&mut p, &format!("{pre}.ffn_norm"), d, Group::Unifier);
            add_ffn(&mut p, &mut init, &format!("{pre}.ffn"), d, c.ffn_width(), Group::Unifier);
        }
        add_norm(&mut p, "unifier.norm_out", d, Group::Unifier);

        for l in 0..c.temporal_layers {
            let pre = format!("temporal.{l}");
            add_norm(&mut p, &format!("{pre}.attn_norm"), d, Group::Temporal);
            add_attention(&mut p, &mut init, &format!("{pre}.attn"), d, Group::Temporal);
            add_norm(&mut p, &format!("{pre}.ffn_norm"), d, Group::Temporal);
            add_ffn(&mut p, &mut init, &format!("{pre}.ffn"), d, c.ffn_width(), Group::Temporal);
        }
        if c.temporal_layers > 0 {
            add_norm(&mut p, "temporal.norm_out", d, Group::Temporal);
        }

        add_linear(&mut p, &mut init, "decoder.query_proj", d, d, Group::Decoder);
        add_norm(&mut p, "decoder.norm_kv", d, Group::Decoder);
        add_attention(&mut p, &mut init, "decoder.attn", d, Group::Decoder);
        add_norm(&mut p, "decoder.norm_out", d, Group::Decoder);
        add_linear(&mut p, &mut init, "decoder.out", d, c.patch_len, Group::Decoder);

        p.insert("head.agg_query", init.uniform(&[1, d], 1.0), Group::Head, ParamKind::Embedding);
        add_norm(&mut p, "head.norm_kv", d, Group::Head);
        add_attention(&mut p, &mut init, "head.attn", d, Group::Head);
        add_norm(&mut p, "head.norm_out", d, Group::Head);
        add_linear(&mut p, &mut init, "head.classifier", d, c.num_classes, Group::Head);

        Ok(Self { config, params: p, quant: None })
    }

    /// Names of the linear layers that receive LoRA adapters: query and value
    /// projections of unifier self-attention and of every temporal layer.
    pub fn lora_targets(&self) -> Vec<String> {
        let mut t = Vec::new();
        for b in 0..self.config.unifier_depth {
            t.push(format!("unifier.{b}.self.q"));
            t.push(format!("unifier.{b}.self.v"));
        }
        for l in 0..self.config.temporal_layers {
            t.push(format!("temporal.{l}.attn.q"));
            t.push(format!("temporal.{l}.attn.v"));
        }
        t
    }

    pub fn has_lora(&self) -> bool {
        self.params.iter().any(|(_, p)| p.group == Group::Lora)
    }

    /// Attach zero-initialised (`B = 0`) adapters to every LoRA target. No-op if present.
    pub fn attach_lora(&mut self, seed: u64) -> Result<()> {
        if self.has_lora() {
            return Ok(());
        }
        let r = self.config.lora.rank;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        for name in self.lora_targets() {
            let w = self.params.tensor(&format!("{name}.weight"))?;
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            let a = init.uniform(&[r, d_in], 1.0 / (d_in as f64).sqrt());
            self.params.insert(format!("{name}.lora_a"), a, Group::Lora, ParamKind::LoraA);
            self.params.insert(format!("{name}.lora_b"), Tensor::zeros(&[d_out, r]), Group::Lora, ParamKind::LoraB);
        }
        Ok(())
    }

    /// Fold every adapter into its base weight (`W += α/r · B·A`) and drop the adapters.
    pub fn merge_lora(&mut self) -> Result<()> {
        let scale = self.config.lora.alpha / self.config.lora.rank as f64;
        for name in self.lora_targets() {
            let (Some(a), Some(b)) = (
                self.params.remove(&format!("{name}.lora_a")),
                self.params.remove(&format!("{name}.lora_b")),
            ) else {
                continue;
            };
            let delta = heads::lora_delta(&a.value, &b.value)?;
            let w = self.params.get_mut(&format!("{name}.weight")).expect("lora target weight");
            for (wv, dv) in w.value.data_mut().iter_mut().zip(delta.data()) {
                *wv += scale * dv;
            }
        }
        Ok(())
    }

    /// Mark parameters trainable according to `pred`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str, &Param) -> bool) {
        for (n, p) in self.params.iter_mut() {
            p.trainable = pred(n, p);
        }
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self)
    }

    /// Encode one window into latents `[P·Q, D]` (patch-major).
    pub fn encode(&self, s: &mut Session, grid: &PatchGrid, mask: Option<&heads::MaskPlan>) -> Result<Var> {
        let (c, p) = grid.dims();
        let tokens = patch_embed::embed_grid(s, grid, mask)?;
        let latent = unifier::unify(s, tokens, c, p)?;
        temporal::temporal_forward(s, latent, p, self.config.num_queries, 0.0)
    }

    /// Class logits `[1, K]` for one window.
    pub fn logits(&self, s: &mut Session, grid: &PatchGrid) -> Result<Var> {
        let latent = self.encode(s, grid, None)?;
        Ok(heads::aggregate_and_classify(s, latent, grid.dims().1, self.config.num_queries)?.logits)
    }

    /// Evaluation-mode forward returning logits as plain values.
    pub fn predict(&self, grid: &PatchGrid) -> Result<Vec<f64>> {
        let mut s = self.session();
        let l = self.logits(&mut s, grid)?;
        Ok(s.g.value(l).data().to_vec())
    }
}

/// Finite-difference check of `loss` with respect to named model parameters.
///
/// `params[i] = (name, coords)` selects which flat entries of each tensor are
/// perturbed (`None` = all). Dropout and quantization follow the model state.
pub fn check_param_gradients<F>(model: &Model, params: &[(&str, Option<Vec<usize>>)], loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = model.session().with_grads();
    let out = loss(&mut s)?;
    s.g.backward(out)?;
    let mut inputs = Vec::with_capacity(params.len());
    let mut analytic = Vec::with_capacity(params.len());
    for (name, _) in params {
        let t = model.params.tensor(name)?.clone();
        analytic.push(if s.is_bound(name) {
            let v = s.param(name)?;
            s.g.grad_or_zeros(v)
        } else {
            Tensor::zeros(t.shape())
        });
        inputs.push(t);
    }
    let coords: Vec<Option<Vec<usize>>> = params.iter().map(|(_, c)| c.clone()).collect();
    let mut work = model.clone();
    gradcheck::compare(&inputs, &analytic, &coords, |vals| {
        for ((name, _), v) in params.iter().zip(vals) {
            work.params.get_mut(name).expect("checked above").value = v.clone();
        }
        let mut s = work.session();
        let out = loss(&mut s)?;
        Ok(s.g.value(out).data()[0])
    })
}

/// One forward (and optionally backward) pass over a model.
///
/// Parameters are bound lazily as graph leaves the first time a layer asks for them.
/// Leaves require gradients only when the session was opened with
/// [`Session::with_grads`] and the parameter is marked trainable.
pub struct Session<'m> {
    pub g: Graph,
    model: &'m Model,
    bound: HashMap<String, Var>,
    track_grads: bool,
    calib: Option<CalibStats>,
    quant_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
    /// Head-averaged attention of the first unification block, `[P, Q, C]`.
    pub unifier_attn: Option<Tensor>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            g: Graph::new(),
            model,
            bound: HashMap::new(),
            track_grads: false,
            calib: None,
            quant_enabled: model.quant.is_some(),
            dropout_rng: None,
            unifier_attn: None,
        }
    }

    pub fn with_grads(mut self) -> Self {
        self.track_grads = true;
        self
    }

    /// Enable dropout with a seeded mask stream (training mode).
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    /// Record activation statistics at every quantization site.
    pub fn with_calibration(mut self) -> Self {
        self.calib = Some(CalibStats::default());
        self.quant_enabled = false;
        self
    }

    /// Run in full precision even if the model carries a quantization state.
    pub fn without_quant(mut self) -> Self {
        self.quant_enabled = false;
        self
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn config(&self) -> &'m EncoderConfig {
        &self.model.config
    }

    pub fn take_calibration(&mut self) -> Option<CalibStats> {
        self.calib.take()
    }

    /// Bind (or fetch) the graph leaf for parameter `name`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let v = self.g.leaf(p.value.clone(), self.track_grads && p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of all bound, trainable parameters after `g.backward`.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .bound
            .iter()
            .filter(|(_, &v)| self.g.requires_grad(v))
            .map(|(n, &v)| (n.clone(), self.g.grad_or_zeros(v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    fn quant_input(&mut self, site: &str, x: Var) -> Result<Var> {
        if let Some(c) = self.calib.as_mut() {
            c.observe(site, self.g.value(x).data());
        }
        if !self.quant_enabled {
            return Ok(x);
        }
        let q = self.model.quant.as_ref().expect("quant state");
        let (lo, hi) = q.range(site)?;
        let grid = activation_grid(lo, hi, q.spec.act_bits);
        self.g.fake_quant(x, &grid)
    }

    fn quant_weight(&mut self, w: Var) -> Result<Var> {
        if !self.quant_enabled {
            return Ok(w);
        }
        let bits = self.model.quant.as_ref().expect("quant state").spec.weight_bits;
        let grid = weight_grid(self.g.value(w), bits);
        self.g.fake_quant(w, &grid)
    }

    /// `y = x·Wᵀ + b (+ α/r · (x·Aᵀ)·Bᵀ when an adapter is attached)` for `x[N, d_in]`.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let xq = self.quant_input(&format!("{name}.input"), x)?;
        let w = self.param(&format!("{name}.weight"))?;
        let wq = self.quant_weight(w)?;
        let y = self.g.gemm(xq, wq, false, true)?;
        let b = self.param(&format!("{name}.bias"))?;
        let mut y = self.g.add_row(y, b)?;
        let a_name = format!("{name}.lora_a");
        if self.model.params.contains(&a_name) {
            let a = self.param(&a_name)?;
            let bb = self.param(&format!("{name}.lora_b"))?;
            let lora = &self.model.config.lora;
            let t = self.g.gemm(x, a, false, true)?;
            let t = self.g.gemm(t, bb, false, true)?;
            let t = self.g.scale(t, lora.alpha / lora.rank as f64);
            y = self.g.add(y, t)?;
        }
        Ok(y)
    }

    pub fn layer_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        self.g.layer_norm(x, g, b, self.model.config.ln_eps)
    }

    pub fn ffn(&mut self, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{name}.fc1"), x)?;
        let h = self.g.gelu(h);
        let h = self.dropout(h)?;
        self.linear(&format!("{name}.fc2"), h)
    }

    /// Inverted dropout; identity unless the session was opened with [`Session::with_dropout`].
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        self.g.mul(x, m)
    }

    /// Multi-head attention.
    ///
    /// * `q_in` is `[bq·lq, D]` with `bq ∈ {1, batch}`; a single query block is shared by every batch item.
    /// * `kv_in` is `[batch·lk, D]`.
    /// * `rope` supplies per-slot positions for queries and keys.
    ///
    /// Returns the projected output `[batch·lq, D]` and the probabilities `[batch·H, lq, lk]`.
    pub fn attention(
        &mut self,
        name: &str,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        rope: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Var)> {
        let cfg = self.model.config.clone();
        let (h, dh, d) = (cfg.heads, cfg.head_dim(), cfg.d_model);
        let bq = self.g.shape(q_in)[0] / lq.max(1);
        if bq != 1 && bq != batch {
            return Err(Error::Dimension(format!("attention: {bq} query blocks for batch {batch}")));
        }
        let q = self.linear(&format!("{name}.q"), q_in)?;
        let q = self.g.reshape(q, &[bq, lq, h, dh])?;
        let q = self.g.permute(q, &[0, 2, 1, 3])?;
        let q = if bq == 1 && batch > 1 { self.g.tile(q, batch) } else { q };
        let mut q = self.g.reshape(q, &[batch * h, lq, dh])?;

        let split = |s: &mut Self, v: Var| -> Result<Var> {
            let v = s.g.reshape(v, &[batch, lk, h, dh])?;
            let v = s.g.permute(v, &[0, 2, 1, 3])?;
            s.g.reshape(v, &[batch * h, lk, dh])
        };
        let k = self.linear(&format!("{name}.k"), kv_in)?;
        let mut k = split(self, k)?;
        let v = self.linear(&format!("{name}.v"), kv_in)?;
        let v = split(self, v)?;

        if let Some((qp, kp)) = rope {
            q = self.g.rope(q, qp, cfg.rope_base)?;
            k = self.g.rope(k, kp, cfg.rope_base)?;
        }
        let scores = self.g.gemm(q, k, false, true)?;
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = self.g.softmax(scores);
        let ctx = self.g.gemm(probs, v, false, false)?;
        let ctx = self.g.reshape(ctx, &[batch, h, lq, dh])?;
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.g.reshape(ctx, &[batch * lq, d])?;
        let out = self.linear(&format!("{name}.o"), ctx)?;
        Ok((out, probs))
    }

    /// Average attention probabilities `[batch·H, lq, lk]` over heads → `[batch, lq, lk]`.
    pub fn head_average(&self, probs: Var, batch: usize) -> Tensor {
        let t = self.g.value(probs);
        let s = t.shape();
        let (lq, lk) = (s[1], s[2]);
        let h = s[0] / batch;
        let mut out = vec![0.0; batch * lq * lk];
        for b in 0..batch {
            for hh in 0..h {
                let src = &t.data()[(b * h + hh) * lq * lk..(b * h + hh + 1) * lq * lk];
                for (o, v) in out[b * lq * lk..(b + 1) * lq * lk].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= h as f64);
        Tensor::new(vec![batch, lq, lk], out).unwrap()
    }
}
