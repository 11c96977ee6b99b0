//! Command-line workbench, file formats, synthetic data and cost accounting.

pub mod attn;
pub mod cost;
pub mod formats;
pub mod synth;

pub use attn::{attention_rows, dump_attention, rows_to_csv, AttentionRow, CSV_HEADER};
pub use cost::{
    battery_days, cost_report, count_macs, count_params, macs_for, streaming_latency_ms, CostReport, ParamCount, BATTERY_J,
    PATCH_MS,
};
pub use formats::{
    decode_bsr, decode_checkpoint, encode_bsr, encode_checkpoint, load_checkpoint, read_bsr, save_checkpoint, write_atomic,
    write_bsr,
};
pub use synth::{generate, generate_synthetic, labeled_task, SynthParams, TaskSpec};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Model};
use crate::quant::{self, QuantMode, QuantSpec};
use crate::sigproc::{preprocess, segment_and_patch, Modality, PatchGrid, PreprocessConfig, TARGET_FS};
use crate::trainer::{self, Dataset, LogRecord, TrainConfig, TrainLog, TrainMode};

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub pretrain: Option<TrainConfig>,
    pub finetune: Option<TrainConfig>,
    pub task: TaskSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.encoder.validate()?;
        Ok(cfg)
    }

    fn pretrain_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, mode: TrainMode::Pretrain, ..self.pretrain.clone().unwrap_or_else(TrainConfig::pretrain) }
    }

    fn finetune_cfg(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.finetune.clone().unwrap_or_default() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "biofuse", version, about = "Multimodal biosignal encoder workbench")]
struct Cli {
    /// JSON file with `encoder`, `pretrain`, `finetune` and `task` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic recording (.bsr + .json sidecar).
    Synth {
        #[arg(long)]
        modality: String,
        #[arg(long)]
        seconds: f64,
        #[arg(long, default_value_t = TARGET_FS)]
        fs: f64,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Band-pass, notch, resample to 256 Hz and z-score a recording.
    Preprocess {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Mains frequency in Hz.
        #[arg(long, default_value_t = 50.0)]
        notch: f64,
        #[arg(long)]
        no_notch: bool,
    },
    /// Masked-reconstruction pretraining on 256 Hz recordings (synthetic if none given).
    Pretrain {
        #[arg(short, long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        window: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the synthetic labeled task.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "ff")]
        mode: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Post-training or quantization-aware quantization of a checkpoint.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        weights: u32,
        #[arg(long)]
        acts: u32,
        #[arg(long, default_value = "ptq")]
        mode: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate a checkpoint on the synthetic task's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset, e.g. `eeg,ecg`.
        #[arg(long)]
        modalities: Option<String>,
    },
    /// Export unifier attention of one window as CSV.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        window: f64,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Parameter, MAC, storage, latency and battery report.
    Cost {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        channels: usize,
        #[arg(long, default_value_t = 10.0)]
        window: f64,
        #[arg(long)]
        weights: Option<u32>,
        #[arg(long)]
        acts: Option<u32>,
        /// Measured compute time per inference on the target.
        #[arg(long, default_value_t = 325.6)]
        compute_ms: f64,
        /// Measured energy per window on the target.
        #[arg(long, default_value_t = 18.8)]
        energy_mj: f64,
    },
}

/// Run the CLI; returns the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let args = match Cli::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_log(path: Option<&Path>, records: &[LogRecord]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
}

/// Train / validation / test split of the configured synthetic task (60/20/20).
pub fn task_splits(task: &TaskSpec, encoder: &EncoderConfig, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let k = if task.multilabel { 2 } else { task.classes };
    if k != encoder.num_classes {
        return Err(Error::Config(format!("task has {k} outputs, encoder num_classes is {}", encoder.num_classes)));
    }
    let data = labeled_task(&TaskSpec { seed, ..task.clone() })?;
    let n = data.len();
    let (a, b) = (n * 3 / 5, n * 4 / 5);
    let idx: Vec<usize> = (0..n).collect();
    Ok((data.subset(&idx[..a]), data.subset(&idx[a..b]), data.subset(&idx[b..])))
}

fn recording_windows(paths: &[PathBuf], window: f64) -> Result<Vec<PatchGrid>> {
    let mut out = Vec::new();
    for p in paths {
        let rec = read_bsr(p)?;
        if (rec.sample_rate_hz - TARGET_FS).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{} is at {} Hz; run `preprocess` first",
                p.display(),
                rec.sample_rate_hz
            )));
        }
        out.extend(segment_and_patch(&rec, window)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidWindow(format!("inputs are shorter than one {window} s window")));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let rc = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.cmd {
        Command::Synth { modality, seconds, fs, channels, output } => {
            let m: Modality = modality.parse()?;
            let n = channels.unwrap_or_else(|| synth::default_channels(m));
            let rec = generate(m, seconds, fs, seed, n, &SynthParams::default())?;
            write_bsr(&output, &rec)
        }
        Command::Preprocess { input, output, notch, no_notch } => {
            let rec = read_bsr(&input)?;
            let cfg = PreprocessConfig { notch_hz: (!no_notch).then_some(notch), ..PreprocessConfig::default() };
            write_bsr(&output, &preprocess(&rec, &cfg)?)
        }
        Command::Pretrain { input, window, steps, output, log } => {
            let mut cfg = rc.pretrain_cfg(seed);
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let windows = if input.is_empty() {
                let task = TaskSpec { window_s: window, multilabel: false, ..rc.task.clone() };
                labeled_task(&TaskSpec { seed, ..task })?.windows
            } else {
                recording_windows(&input, window)?
            };
            let mut model = Model::new(rc.encoder.clone(), seed)?;
            let mut tl = TrainLog::new();
            trainer::pretrain(&mut model, &windows, &cfg, &mut tl)?;
            write_log(log.as_deref(), &tl.records)?;
            save_checkpoint(&output, &model)
        }
        Command::Finetune { checkpoint, mode, epochs, output, log } => {
            let mode: TrainMode = mode.parse()?;
            let model = load_checkpoint(&checkpoint)?;
            let mut cfg = rc.finetune_cfg(seed);
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let (train, val, test) = task_splits(&rc.task, &model.config, seed)?;
            let mut tl = TrainLog::new();
            let out = trainer::finetune(&model, mode, &train, &val, &cfg, &mut tl)?;
            write_log(log.as_deref(), &tl.records)?;
            save_checkpoint(&output, &out.model)?;
            print_json(&trainer::evaluate(&out.model, &test)?)
        }
        Command::Quantize { checkpoint, weights, acts, mode, epochs, output } => {
            let mode = match mode.to_ascii_lowercase().as_str() {
                "ptq" => QuantMode::Ptq,
                "qat" => QuantMode::Qat,
                other => return Err(Error::Config(format!("unknown quantization mode `{other}` (ptq, qat)"))),
            };
            let spec = QuantSpec::new(weights, acts, mode)?;
            let model = load_checkpoint(&checkpoint)?;
            let (train, val, test) = task_splits(&rc.task, &model.config, seed)?;
            let q = match mode {
                QuantMode::Ptq => quant::apply_ptq(&model, spec, &quant::calibrate(&model, &train.windows)?)?,
                QuantMode::Qat => {
                    let cfg = TrainConfig { epochs: epochs.unwrap_or(quant::QAT_EPOCHS), ..rc.finetune_cfg(seed) };
                    quant::qat_finetune(&model, spec, &train, &val, &cfg, &mut TrainLog::new())?.model
                }
            };
            save_checkpoint(&output, &q)?;
            print_json(&serde_json::json!({
                "metrics": trainer::evaluate(&q, &test)?,
                "packed": quant::packed_size_bytes(&q, &spec)?,
            }))
        }
        Command::Eval { checkpoint, modalities } => {
            let model = load_checkpoint(&checkpoint)?;
            let (_, _, mut test) = task_splits(&rc.task, &model.config, seed)?;
            if let Some(m) = modalities {
                test = test.select_modalities(&parse_modalities(&m)?)?;
            }
            print_json(&trainer::evaluate(&model, &test)?)
        }
        Command::Attn { checkpoint, input, window, index, output } => {
            let model = load_checkpoint(&checkpoint)?;
            let windows = recording_windows(&[input], window)?;
            let grid = windows
                .get(index)
                .ok_or_else(|| Error::Config(format!("window {index} out of range ({} windows)", windows.len())))?;
            write_atomic(&output, dump_attention(&model, grid)?.as_bytes())
        }
        Command::Cost { checkpoint, channels, window, weights, acts, compute_ms, energy_mj } => {
            let model = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => Model::new(rc.encoder.clone(), seed)?,
            };
            let spec = match (weights, acts) {
                (Some(w), Some(a)) => Some(QuantSpec::new(w, a, QuantMode::Ptq)?),
                (None, None) => None,
                _ => return Err(Error::Config("give both --weights and --acts, or neither".into())),
            };
            print_json(&cost_report(&model, channels, window, spec, compute_ms, energy_mj)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        std::iter::once("biofuse".to_string()).chain(s.split_whitespace().map(String::from)).collect()
    }

    #[test]
    fn usage_and_config_errors_exit_2() {
        assert_eq!(cli(argv("synth --bogus")), 2);
        assert_eq!(cli(argv("frobnicate")), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.ckpt");
        let cmd = format!("quantize --checkpoint {} --weights 2 --acts 4 --mode ptq -o {}", out.display(), out.display());
        assert_eq!(cli(argv(&cmd)), 2);
        assert_eq!(cli(argv(&format!("synth --modality emg --seconds 1 -o {}", out.display()))), 2);
    }

    #[test]
    fn synth_is_seeded_and_missing_file_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bsr");
        let b = dir.path().join("b.bsr");
        assert_eq!(cli(argv(&format!("synth --modality ecg --seconds 60 --seed 7 -o {}", a.display()))), 0);
        assert_eq!(cli(argv(&format!("synth --modality ecg --seconds 60 --seed 7 -o {}", b.display()))), 0);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let rec = read_bsr(&a).unwrap();
        assert_eq!(rec.len(), 60 * 256);
        let missing = dir.path().join("none.ckpt");
        assert_eq!(cli(argv(&format!("eval --checkpoint {}", missing.display()))), 1);
    }
}
