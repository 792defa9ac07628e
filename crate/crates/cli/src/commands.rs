use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use cascade_attn::data::{generate_synthetic, subsample, Dataset, SyntheticTask, SyntheticTaskSpec, CLASS_NAMES};
use cascade_attn::experiments::{
    compare_architectures, gradcheck_suite, CompareSettings, GradFault, GradcheckSettings,
};
use cascade_attn::models::{
    attention_alignments, build_model, count_params as model_params, load_checkpoint, save_checkpoint,
    ArchitectureKind, ModelConfig,
};
use cascade_attn::optim::{evaluate, load_train_state, save_train_state, train_epochs, TrainConfig, TrainState};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::config::echo;
use crate::{CliError, CliResult};

const STATE_FILE: &str = "state.cats";
const MODEL_FILE: &str = "model.carn";
const LOG_FILE: &str = "train_log.jsonl";

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    /// TOML file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// face-only, context-only or joint.
    #[arg(long)]
    task: SyntheticTask,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train_clips: usize,
    #[arg(long, default_value_t = 400)]
    valid_clips: usize,
    #[arg(long, default_value_t = 400)]
    test_clips: usize,
    #[arg(long, default_value_t = 8)]
    min_frames: usize,
    #[arg(long, default_value_t = 32)]
    max_frames: usize,
    #[arg(long, default_value_t = 16)]
    face_dim: usize,
    #[arg(long, default_value_t = 16)]
    context_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 0.25)]
    noise_sigma: f64,
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    let spec = SyntheticTaskSpec {
        task: a.task,
        train_clips: a.train_clips,
        valid_clips: a.valid_clips,
        test_clips: a.test_clips,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        face_dim: a.face_dim,
        context_dim: a.context_dim,
        magnitude: a.magnitude,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    spec.validate()?;
    fs::create_dir_all(&a.out)?;
    let generated = generate_synthetic(&spec, &a.out)?;
    echo(&a.out, &a)?;
    println!("{:<6}{}", "split", CLASS_NAMES.map(|c| format!("{c:>9}")).join(""));
    for (name, hist) in &generated.histograms {
        println!("{name:<6}{}", hist.map(|n| format!("{n:>9}")).join(""));
    }
    println!("nearest-signal decoder accuracy: {:.2}%", 100.0 * generated.oracle_accuracy);
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Size-matched comparison sizes.
    Comparison,
    /// Hidden 128 everywhere, two left layers, one right layer.
    Base,
}

#[derive(Args, Serialize)]
pub struct ModelFlags {
    #[arg(long, value_enum, default_value_t = Preset::Comparison)]
    preset: Preset,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    encoded_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    right_hidden_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    left_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    right_layers: Option<usize>,
}

impl ModelFlags {
    fn config(&self, kind: ArchitectureKind, face_dim: usize, context_dim: usize, seed: u64) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Comparison => ModelConfig::comparison(kind, face_dim, context_dim),
            Preset::Base => ModelConfig::new(kind, face_dim, context_dim),
        }
        .with_seed(seed);
        if let Some(v) = self.encoded_dim {
            c.encoded_dim = v;
        }
        if let Some(v) = self.hidden_size {
            c.hidden_size = v;
            if kind.is_cascade() && self.right_hidden_size.is_none() {
                c.right_hidden_size = v;
            }
        }
        if let Some(v) = self.right_hidden_size {
            c.right_hidden_size = v;
        }
        if let Some(v) = self.left_layers {
            c.left_layers = v;
        }
        if let Some(v) = self.right_layers {
            c.right_layers = v;
        }
        c
    }
}

#[derive(Args, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Temporal subsampling stride (keep every n-th frame).
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_grad_norm: Option<f64>,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            subsample_stride: self.stride,
            seed: self.seed,
            clip_grad_norm: self.clip_grad_norm,
        }
    }
}

/// `--train-manifest` / `--valid-manifest`, defaulting to `DATA/train.json`
/// and `DATA/valid.json`.
#[derive(Args, Serialize)]
pub struct SplitFlags {
    /// Directory written by gen-data.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_manifest: Option<PathBuf>,
}

impl SplitFlags {
    fn train_path(&self) -> CliResult<PathBuf> {
        self.train_manifest
            .clone()
            .or_else(|| self.data.as_ref().map(|d| d.join("train.json")))
            .ok_or_else(|| CliError::Usage("give --data or --train-manifest".into()))
    }

    fn valid_path(&self) -> Option<PathBuf> {
        self.valid_manifest
            .clone()
            .or_else(|| self.data.as_ref().map(|d| d.join("valid.json")).filter(|p| p.exists()))
    }
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// TOML file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: ArchitectureKind,
    /// Output directory for the checkpoint, log, state and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Continue from OUT/state.cats.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    #[serde(flatten)]
    splits: SplitFlags,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelFlags,
}

pub fn train(a: TrainArgs) -> CliResult {
    let train_set = Dataset::load(a.splits.train_path()?)?;
    let valid = a.splits.valid_path().map(Dataset::load).transpose()?;
    let (face_dim, context_dim) = train_set.feature_dims()?;
    let model_config = a.model.config(a.arch, face_dim, context_dim, a.train.seed);
    let config = a.train.config();
    config.validate()?;
    fs::create_dir_all(&a.out)?;
    echo(&a.out, &a)?;

    let state_path = a.out.join(STATE_FILE);
    let log_path = a.out.join(LOG_FILE);
    let mut state = if a.resume {
        let (state, seed) = load_train_state(&state_path)?;
        if seed != config.seed || state.model.config() != &model_config {
            return Err(CliError::Usage(format!(
                "{} was written by a run with a different seed or model configuration",
                state_path.display()
            )));
        }
        state
    } else {
        TrainState::new(build_model(&model_config)?, &config)
    };
    // Keep the log lines of the epochs the state already covers.
    let kept: Vec<String> = if a.resume && log_path.exists() {
        fs::read_to_string(&log_path)?
            .lines()
            .take(state.epochs_done)
            .map(str::to_owned)
            .collect()
    } else {
        Vec::new()
    };
    let mut log = BufWriter::new(File::create(&log_path)?);
    for line in &kept {
        writeln!(log, "{line}")?;
    }
    log.flush()?;

    let model_path = a.out.join(MODEL_FILE);
    let seed = config.seed;
    train_epochs(&mut state, &train_set, valid.as_ref(), &config, |entry, st| {
        let line = entry.to_json_line();
        println!("{line}");
        writeln!(log, "{line}")?;
        log.flush()?;
        save_checkpoint(&st.model, &model_path)?;
        save_train_state(st, seed, &state_path)
    })?;
    if !model_path.exists() {
        save_checkpoint(&state.model, &model_path)?;
    }
    Ok(())
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// TOML file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split manifest to evaluate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<PathBuf>,
    /// With --split, evaluates DATA/SPLIT.json.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    split: String,
    /// Refuse checkpoints of any other architecture.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    arch: Option<ArchitectureKind>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Directory for eval_report.json, confusion.txt and the resolved config.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Write every clip's attention alignments as JSON lines (cascade kinds only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dump_alignments: Option<PathBuf>,
}

#[derive(Serialize)]
struct AlignmentRecord<'a> {
    clip_id: &'a str,
    /// Row `t`: weights over the left stack's states when the right stack is at step `t`.
    alignments: Vec<&'a [f64]>,
}

pub fn eval(a: EvalArgs) -> CliResult {
    let manifest = match (&a.manifest, &a.data) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => d.join(format!("{}.json", a.split)),
        (None, None) => return Err(CliError::Usage("give --manifest or --data".into())),
    };
    let model = load_checkpoint(&a.checkpoint)?;
    if let Some(kind) = a.arch {
        if kind != model.kind() {
            return Err(CliError::Usage(format!(
                "checkpoint holds a {} model, not {kind}",
                model.kind()
            )));
        }
    }
    let data = Dataset::load(&manifest)?;
    let report = evaluate(&model, &data, a.stride)?;
    let json = serde_json::to_string_pretty(&report).map_err(cascade_attn::Error::from)?;
    let table = report.confusion.render(&CLASS_NAMES);
    println!("{json}");
    print!("{table}");
    if let Some(path) = &a.dump_alignments {
        if !model.kind().is_cascade() {
            return Err(CliError::Usage(format!("{} has no attention to dump", model.kind())));
        }
        let mut out = BufWriter::new(File::create(path)?);
        for clip in &data.clips {
            let c = subsample(clip, a.stride, 0)?;
            let rows = attention_alignments(&model, &c.face, &c.context)?.expect("cascade kinds attend");
            let record = AlignmentRecord {
                clip_id: &clip.clip_id,
                alignments: rows.row_iter().collect(),
            };
            serde_json::to_writer(&mut out, &record).map_err(cascade_attn::Error::from)?;
            writeln!(out)?;
        }
        out.flush()?;
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval_report.json"), format!("{json}\n"))?;
        fs::write(dir.join("confusion.txt"), &table)?;
        echo(dir, &a)?;
    }
    Ok(())
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
pub struct CompareArgs {
    /// TOML file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Runs per architecture; run i uses seed SEED + i.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Comma-separated subset of architectures.
    #[arg(long, value_delimiter = ',', default_values = ArchitectureKind::ALL.map(ArchitectureKind::slug))]
    archs: Vec<ArchitectureKind>,
    /// Directory for comparison.json, comparison.txt and the resolved config.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    splits: SplitFlags,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
}

pub fn compare(a: CompareArgs) -> CliResult {
    let train_set = Dataset::load(a.splits.train_path()?)?;
    let valid_path = a
        .splits
        .valid_path()
        .ok_or_else(|| CliError::Usage("compare needs a validation split (--valid-manifest or DATA/valid.json)".into()))?;
    let valid = Dataset::load(valid_path)?;
    let settings = CompareSettings {
        seeds: a.seeds,
        base_seed: a.train.seed,
        train: a.train.config(),
    };
    settings.train.validate()?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        echo(dir, &a)?;
    }
    let table = compare_architectures(&a.archs, &train_set, &valid, &settings, |run| {
        eprintln!(
            "{} seed {}: ACC {:.2}% mAP {:.2}%",
            run.kind.slug(),
            run.seed,
            100.0 * run.accuracy,
            100.0 * run.map
        );
    })?;
    let text = table.render();
    print!("{text}");
    if let Some(dir) = &a.out {
        let json = serde_json::to_string_pretty(&table).map_err(cascade_attn::Error::from)?;
        fs::write(dir.join("comparison.json"), format!("{json}\n"))?;
        fs::write(dir.join("comparison.txt"), &text)?;
    }
    Ok(())
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    /// TOML file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// KIND[:BLOCK[:FACTOR]] scales one analytic gradient block (negative control).
    #[arg(long, hide = true)]
    #[serde(skip)]
    inject_fault: Option<String>,
}

fn parse_fault(s: &str) -> CliResult<GradFault> {
    let mut parts = s.split(':');
    let kind = parts.next().unwrap_or_default().parse::<ArchitectureKind>()?;
    let block = parts.next().unwrap_or("left.0.w_hidden").to_string();
    let factor = match parts.next() {
        Some(f) => f
            .parse()
            .map_err(|_| CliError::Usage(format!("bad fault factor {f:?}")))?,
        None => 1.5,
    };
    Ok(GradFault { kind, block, factor })
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let settings = GradcheckSettings {
        epsilon: a.epsilon,
        tolerance: a.tolerance,
        steps: a.steps,
        seed: a.seed,
        fault: a.inject_fault.as_deref().map(parse_fault).transpose()?,
    };
    let outcomes = gradcheck_suite(&settings)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let verdict = if o.report.passed {
            "ok".to_string()
        } else {
            failed.push(o.kind.display_name());
            format!("FAIL (worst: {}[{}])", o.worst_block, o.worst_offset)
        };
        println!(
            "{:<18} {:>5} params  max relative error {:.3e}  {verdict}",
            o.kind.display_name(),
            o.num_params,
            o.report.max_relative_error
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed at tolerance {:e} for: {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}

#[derive(Args, Serialize)]
#[command(args_override_self = true)]
pub struct CountParamsArgs {
    /// TOML file of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// One architecture; all six when omitted.
    #[arg(long)]
    arch: Option<ArchitectureKind>,
    #[arg(long, default_value_t = 16)]
    face_dim: usize,
    #[arg(long, default_value_t = 16)]
    context_dim: usize,
    #[command(flatten)]
    model: ModelFlags,
}

pub fn count_params(a: CountParamsArgs) -> CliResult {
    let kinds = a.arch.map(|k| vec![k]).unwrap_or_else(|| ArchitectureKind::ALL.to_vec());
    println!("{:<18} {:>10}", "Model", "#params");
    for kind in kinds {
        let model = build_model(&a.model.config(kind, a.face_dim, a.context_dim, 0))?;
        println!("{:<18} {:>10}", kind.display_name(), model_params(&model));
    }
    Ok(())
}

