//! Masked-reconstruction pretraining, supervised fine-tuning (FF / FE / LoRA),
//! and evaluation metrics.

mod metrics;
mod optim;

pub use metrics::{
    argmax, auroc_binary, average_precision, balanced_accuracy, cohen_kappa, compute_metrics,
    compute_multilabel_metrics, confusion_matrix, weighted_f1, MetricBundle,
};
pub use optim::{cosine_lr, AdamW};

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{make_mask, masked_mse, reconstruct, MaskPlan};
use crate::model::{Group, Model, Session, TaskKind};
use crate::numerics::{Tensor, Var};
use crate::sigproc::{Modality, PatchGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    /// Full fine-tuning: every parameter trains.
    Ff,
    /// Frozen encoder: only the classification head trains.
    Fe,
    /// Frozen encoder plus trainable low-rank adapters and head.
    Lora,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" => Ok(TrainMode::Pretrain),
            "ff" => Ok(TrainMode::Ff),
            "fe" => Ok(TrainMode::Fe),
            "lora" => Ok(TrainMode::Lora),
            other => Err(Error::Config(format!("unknown training mode `{other}` (pretrain, ff, fe, lora)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    /// Fine-tuning epochs.
    pub epochs: usize,
    /// Pretraining optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Ff,
            lr: 1e-4,
            epochs: 20,
            steps: 200,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.01,
            mask_ratio: 0.5,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self { mode: TrainMode::Pretrain, lr: 3e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Supervision attached to a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Single(Vec<usize>),
    Multi(Vec<Vec<bool>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Single(v) => Labels::Single(idx.iter().map(|&i| v[i]).collect()),
            Labels::Multi(v) => Labels::Multi(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub windows: Vec<PatchGrid>,
    pub labels: Labels,
}

impl Dataset {
    pub fn new(windows: Vec<PatchGrid>, labels: Labels) -> Result<Self> {
        if windows.len() != labels.len() {
            return Err(Error::Dimension(format!("{} windows, {} labels", windows.len(), labels.len())));
        }
        Ok(Self { windows, labels })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { windows: idx.iter().map(|&i| self.windows[i].clone()).collect(), labels: self.labels.subset(idx) }
    }

    /// Same windows restricted to channels of the listed modalities.
    pub fn select_modalities(&self, keep: &[Modality]) -> Result<Dataset> {
        let windows = self.windows.iter().map(|w| w.select_modalities(keep)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { windows, labels: self.labels.clone() })
    }
}

/// One JSON-lines training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricBundle>,
}

/// Collects records in memory and optionally streams them as JSON lines.
#[derive(Default)]
pub struct TrainLog {
    sink: Option<Box<dyn Write>>,
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_writer(w: impl Write + 'static) -> Self {
        Self { sink: Some(Box::new(w)), records: Vec::new() }
    }

    pub fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Derive an independent stream seed from a base seed and two counters.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn open_session(model: &Model, seed: u64) -> Session<'_> {
    let s = model.session().with_grads();
    if model.config.dropout > 0.0 {
        s.with_dropout(seed)
    } else {
        s
    }
}

/// Masked reconstruction loss of one window.
pub fn pretrain_loss(s: &mut Session, grid: &PatchGrid, plan: &MaskPlan) -> Result<Var> {
    let model = s.model();
    let (_, p) = grid.dims();
    let latent = model.encode(s, grid, Some(plan))?;
    let pred = reconstruct(s, latent, &grid.meta, p)?;
    masked_mse(s, pred, &grid.values, plan)
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: Vec<(String, Tensor)>) {
    for (n, g) in grads {
        match acc.get_mut(&n) {
            Some(t) => t.add_assign(&g),
            None => {
                acc.insert(n, g);
            }
        }
    }
}

fn averaged(acc: BTreeMap<String, Tensor>, n: usize) -> Vec<(String, Tensor)> {
    acc.into_iter().map(|(k, t)| (k, t.map(|v| v / n as f64))).collect()
}

fn check_finite(step: usize, loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss, detail: format!("non-finite {what} loss") });
    }
    Ok(())
}

/// One optimizer step of masked reconstruction on `batch`. Window `i` uses the
/// mask drawn from `mix_seed(seed, 0, i)`. Returns the mean batch loss.
pub fn pretrain_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[PatchGrid],
    ratio: f64,
    seed: u64,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let step = opt.steps() as usize;
    let mut acc = BTreeMap::new();
    let mut total = 0.0;
    for (i, grid) in batch.iter().enumerate() {
        let (c, p) = grid.dims();
        let plan = make_mask(c, p, ratio, mix_seed(seed, 0, i as u64))?;
        let mut s = open_session(model, mix_seed(seed, 1, i as u64));
        let loss = pretrain_loss(&mut s, grid, &plan)?;
        let value = s.g.value(loss).data()[0];
        check_finite(step, value, "reconstruction")?;
        s.g.backward(loss)?;
        total += value;
        accumulate(&mut acc, s.param_grads());
    }
    opt.step(model, &averaged(acc, batch.len()), lr);
    Ok(total / batch.len() as f64)
}

/// Pretrain for `cfg.steps` steps over shuffled windows; returns the loss curve.
pub fn pretrain(model: &mut Model, data: &[PatchGrid], cfg: &TrainConfig, log: &mut TrainLog) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    model.set_trainable(|_, p| p.group != Group::Lora);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2, epoch)));
                epoch += 1;
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let loss = pretrain_step(model, &mut opt, &batch, cfg.mask_ratio, mix_seed(cfg.seed, 3, step as u64), lr)?;
        log.record(LogRecord { step, loss, lr, metrics: None })?;
        losses.push(loss);
    }
    log.flush()?;
    Ok(losses)
}

/// Supervised loss of one window.
fn window_loss(s: &mut Session, grid: &PatchGrid, labels: &Labels, i: usize) -> Result<Var> {
    let model = s.model();
    let logits = model.logits(s, grid)?;
    match labels {
        Labels::Single(y) => s.g.softmax_cross_entropy(logits, &[y[i]]),
        Labels::Multi(y) => {
            let t: Vec<f64> = y[i].iter().map(|&b| b as u8 as f64).collect();
            let k = t.len();
            s.g.bce_with_logits(logits, &Tensor::new(vec![1, k], t)?)
        }
    }
}

/// Class probabilities (softmax) or per-label probabilities (sigmoid) for one window.
pub fn predict_scores(model: &Model, grid: &PatchGrid) -> Result<Vec<f64>> {
    let mut z = model.predict(grid)?;
    match model.config.task {
        TaskKind::SingleLabel => crate::numerics::kernels::softmax_row(&mut z),
        TaskKind::MultiLabel => z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
    }
    Ok(z)
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricBundle> {
    let scores = data.windows.iter().map(|w| predict_scores(model, w)).collect::<Result<Vec<_>>>()?;
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0, loss: f64::NAN, detail: "non-finite scores at evaluation".into() });
    }
    match &data.labels {
        Labels::Single(y) => compute_metrics(y, &scores),
        Labels::Multi(y) => compute_multilabel_metrics(y, &scores),
    }
}

/// Set trainability (and attach adapters) for a fine-tuning mode.
pub fn prepare_mode(model: &Model, mode: TrainMode, seed: u64) -> Result<Model> {
    let mut m = model.clone();
    match mode {
        TrainMode::Ff => m.set_trainable(|_, _| true),
        TrainMode::Fe => m.set_trainable(|_, p| p.group == Group::Head),
        TrainMode::Lora => {
            m.attach_lora(seed)?;
            m.set_trainable(|_, p| matches!(p.group, Group::Head | Group::Lora));
        }
        TrainMode::Pretrain => {
            return Err(Error::Config("fine-tuning mode must be one of ff, fe, lora".into()));
        }
    }
    Ok(m)
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricBundle,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    /// Validation metrics of the returned model.
    pub metrics: MetricBundle,
    /// 0 when no epoch improved on the starting point.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Train `model` as configured (trainability already set) with early stopping on
/// validation balanced accuracy. The starting model is epoch 0 and competes for best.
pub fn fit(model: Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model = model;
    let start = evaluate(&model, val)?;
    let mut best = (start.balanced_accuracy, model.clone(), start, 0);
    let mut history = vec![EpochRecord { epoch: 0, train_loss: f64::NAN, val: start }];
    let mut opt = AdamW::new(cfg.weight_decay);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 4, epoch as u64)));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = BTreeMap::new();
            let mut loss_sum = 0.0;
            for &i in chunk {
                let mut s = open_session(&model, mix_seed(cfg.seed, 5, (step * train.len() + i) as u64));
                let loss = window_loss(&mut s, &train.windows[i], &train.labels, i)?;
                let v = s.g.value(loss).data()[0];
                check_finite(step, v, "classification")?;
                s.g.backward(loss)?;
                loss_sum += v;
                accumulate(&mut acc, s.param_grads());
            }
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(&mut model, &averaged(acc, chunk.len()), lr);
            let loss = loss_sum / chunk.len() as f64;
            log.record(LogRecord { step, loss, lr, metrics: None })?;
            epoch_loss += loss_sum;
            step += 1;
        }
        let val_metrics = evaluate(&model, val)?;
        let train_loss = epoch_loss / train.len() as f64;
        log.record(LogRecord { step, loss: train_loss, lr: cosine_lr(cfg.lr, step, total), metrics: Some(val_metrics) })?;
        history.push(EpochRecord { epoch, train_loss, val: val_metrics });
        if val_metrics.balanced_accuracy > best.0 {
            best = (val_metrics.balanced_accuracy, model.clone(), val_metrics, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    log.flush()?;
    Ok(FinetuneOutcome { model: best.1, metrics: best.2, best_epoch: best.3, history })
}

/// Fine-tune in one of the adaptation modes.
pub fn finetune(
    model: &Model,
    mode: TrainMode,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<FinetuneOutcome> {
    let m = prepare_mode(model, mode, cfg.seed)?;
    fit(m, train, val, cfg, log)
}

/// Number of parameters a mode trains.
pub fn trainable_count(model: &Model) -> usize {
    model.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
}
