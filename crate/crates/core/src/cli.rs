//! The `ftacl` command line.
//!
//! Every subcommand takes an optional `--config FILE` of flat `key=value`
//! lines using the subcommand's long flag names with `_` for `-`. A flag
//! given on the command line wins over the file, which wins over the
//! built-in default; keys the subcommand does not know are rejected.
//! `FTACL_SEED` supplies the default seed.
//!
//! Exit codes: 0 success, 1 runtime or data failure, 2 usage or
//! configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accounting::{complexity_report, param_report, reference_task_classes, AccountingMode};
use crate::encoder::ModelConfig;
use crate::error::Error;
use crate::frontend::{decode_wav, log_mel, frame_count, FrontendConfig, Spectrogram};
use crate::tensor::io as tensor_io;
use crate::ticl::{make_synthetic_tasks, parse_kv, RunConfig, TiclRun, TrainMode};
use crate::tokenizer::{token_grid, TokenizerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Seed used when neither a flag, a config file nor `FTACL_SEED` sets one.
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "ftacl", version, about = "Adapter-incremental continual learning for audio spectrogram transformers")]
pub struct Cli {
    /// Flat key=value file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attention pair counts for global vs factorized attention.
    Analyze(AnalyzeArgs),
    /// Decode a 16-bit PCM WAV and write its log-mel spectrogram.
    Features(FeaturesArgs),
    /// Closed-form parameter and storage report.
    Params(ParamsArgs),
    /// Run a whole synthetic task sequence and write the run directory.
    Ticl(RunArgs),
    /// Train the next task of a run directory, creating it if needed.
    Train(RunArgs),
    /// Evaluate a saved run, or route one feature file through a task.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Mel bins of the spectrogram.
    #[arg(long)]
    pub freq_bins: Option<usize>,
    /// Frames of the spectrogram.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Clip duration; converted to frames with a 10 ms hop.
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// Embedding width `d`.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Print `key=value` records instead of the aligned table.
    #[arg(long)]
    pub kv: bool,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long)]
    pub n_mels: Option<usize>,
    #[arg(long)]
    pub win_ms: Option<f64>,
    #[arg(long)]
    pub hop_ms: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// `paper-full` or `desk`.
    #[arg(long)]
    pub preset: Option<String>,
    /// `full`, `linear`, `model-seq`, `model-inc` or `adapter-inc`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Comma-separated class count per task; defaults to 35,50,28 cycled.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[arg(long)]
    pub in_channels: Option<usize>,
    /// Position grid as `MxT`.
    #[arg(long)]
    pub pos_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub run_dir: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub bottleneck: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub run_dir: PathBuf,
    /// Task whose adapters and head to route through.
    #[arg(long)]
    pub task_id: Option<usize>,
    /// FTT1 spectrogram to classify (needs `--task-id`).
    #[arg(long)]
    pub input: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {}", m.trim_start_matches("error: ").trim_end()),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Runtime errors that are really bad configuration map to usage.
fn classify(e: Error) -> CliError {
    match e {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => usage(e),
        other => runtime(other),
    }
}

/// Config-file values with flag precedence.
struct Layered {
    file: BTreeMap<String, String>,
}

impl Layered {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, CliError> {
        let file = match path {
            None => BTreeMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_kv(&text).map_err(usage)?
            }
        };
        if let Some(k) = file.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(usage(format!("unknown config key {k:?} (allowed: {})", allowed.join(", "))));
        }
        Ok(Layered { file })
    }

    fn pick<T: std::str::FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("invalid value {v:?} for config key {key:?}"))),
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("FTACL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("FTACL_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Usage(String::new()),
        _ => usage(e),
    })?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a, config, out),
        Command::Features(a) => cmd_features(a, config, out),
        Command::Params(a) => cmd_params(a, config, out),
        Command::Ticl(a) => cmd_ticl(a, config, out),
        Command::Train(a) => cmd_train(a, config, out),
        Command::Eval(a) => cmd_eval(a, config, out),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let args: Vec<OsString> = std::env::args_os().collect();
    // help and version are printed by clap itself with exit code 0
    if let Err(e) = Cli::try_parse_from(&args) {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            let _ = e.print();
            return EXIT_OK;
        }
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(runtime)
}

/// Mel bins and durations of the three reference clip geometries.
pub const REFERENCE_CLIPS: [(usize, f64); 3] = [(128, 1.0), (128, 5.0), (128, 10.05)];

fn cmd_analyze(a: AnalyzeArgs, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = Layered::load(
        config,
        &["freq_bins", "frames", "duration_s", "sample_rate", "d", "kernel", "stride", "kv"],
    )?;
    let freq_bins = cfg.pick("freq_bins", a.freq_bins)?;
    let frames = cfg.pick("frames", a.frames)?;
    let duration = cfg.pick("duration_s", a.duration_s)?;
    let sample_rate = cfg.pick("sample_rate", a.sample_rate)?.unwrap_or(16_000);
    let d = cfg.pick("d", a.d)?.unwrap_or(768);
    let kv = a.kv || cfg.pick::<bool>("kv", None)?.unwrap_or(false);
    let mut tok = TokenizerConfig::new(d.max(1));
    tok.kernel = cfg.pick("kernel", a.kernel)?.unwrap_or(tok.kernel);
    tok.stride = cfg.pick("stride", a.stride)?.unwrap_or(tok.stride);

    let hop = FrontendConfig::default()
        .framing(sample_rate)
        .map_err(usage)?
        .hop;
    let to_frames = |secs: f64| -> Result<usize, CliError> {
        if !(secs > 0.0 && secs.is_finite()) {
            return Err(usage(format!("duration must be positive, got {secs}")));
        }
        Ok(frame_count((secs * sample_rate as f64).round() as usize, hop))
    };
    let shapes: Vec<(usize, usize)> = match (frames, duration) {
        (Some(_), Some(_)) => return Err(usage("give --frames or --duration-s, not both")),
        (Some(t), None) => vec![(freq_bins.unwrap_or(128), t)],
        (None, Some(s)) => vec![(freq_bins.unwrap_or(128), to_frames(s)?)],
        (None, None) => REFERENCE_CLIPS
            .iter()
            .map(|&(f, s)| Ok((freq_bins.unwrap_or(f), to_frames(s)?)))
            .collect::<Result<_, CliError>>()?,
    };

    let mut text = String::new();
    if !kv {
        text.push_str("# m t o_gsa_over_d o_fta_over_d k\n");
    }
    for (f, t) in shapes {
        let grid = token_grid(f, t, &tok).map_err(usage)?;
        let r = complexity_report(grid, d).map_err(usage)?;
        if kv {
            text.push_str(&format!(
                "freq_bins={f} frames={t} m={} t={} o_gsa_over_d={} o_fta_over_d={} k={} d={d} o_gsa={} o_fta={}\n",
                r.m,
                r.t,
                r.o_gsa_over_d(),
                r.o_fta_over_d(),
                r.k_display(),
                r.o_gsa,
                r.o_fta
            ));
        } else {
            text.push_str(&format!("{r}\n"));
        }
    }
    write_out(out, &text)
}

fn cmd_features(a: FeaturesArgs, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = Layered::load(config, &["n_mels", "win_ms", "hop_ms"])?;
    let mut fe = FrontendConfig::default();
    fe.n_mels = cfg.pick("n_mels", a.n_mels)?.unwrap_or(fe.n_mels);
    fe.win_ms = cfg.pick("win_ms", a.win_ms)?.unwrap_or(fe.win_ms);
    fe.hop_ms = cfg.pick("hop_ms", a.hop_ms)?.unwrap_or(fe.hop_ms);
    if !a.input.is_file() {
        return Err(usage(format!("input {} is not a readable file", a.input.display())));
    }
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(usage(format!("output directory {} does not exist", parent.display())));
        }
    }
    let bytes = fs::read(&a.input).map_err(runtime)?;
    let clip = decode_wav(&bytes).map_err(runtime)?;
    let spec: Spectrogram = log_mel(&clip, &fe).map_err(classify)?;
    tensor_io::save(&a.output, spec.values()).map_err(runtime)?;
    let [m, t] = spec.shape();
    write_out(
        out,
        &format!(
            "input={} sample_rate={} samples={} shape=[{m},{t}] output={}\n",
            a.input.display(),
            clip.sample_rate,
            clip.samples.len(),
            a.output.display()
        ),
    )
}

fn parse_grid(s: &str) -> Result<crate::tokenizer::TokenGrid, CliError> {
    let (m, t) = s
        .split_once('x')
        .ok_or_else(|| usage(format!("grid {s:?} must look like MxT")))?;
    let m = m.parse().map_err(|_| usage(format!("bad grid rows in {s:?}")))?;
    let t = t.parse().map_err(|_| usage(format!("bad grid columns in {s:?}")))?;
    crate::tokenizer::TokenGrid::new(m, t).map_err(usage)
}

fn cmd_params(a: ParamsArgs, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = Layered::load(
        config,
        &[
            "preset",
            "mode",
            "tasks",
            "classes",
            "embed_dim",
            "layers",
            "heads",
            "bottleneck",
            "in_channels",
            "pos_grid",
        ],
    )?;
    let preset: String = cfg.pick("preset", a.preset)?.unwrap_or_else(|| "paper-full".into());
    let mut model = match preset.as_str() {
        "paper-full" => ModelConfig::paper_full(),
        "desk" => RunConfig::reference(TrainMode::AdapterIncremental, 0).model,
        other => return Err(usage(format!("unknown preset {other:?} (expected paper-full or desk)"))),
    };
    if let Some(d) = cfg.pick("embed_dim", a.embed_dim)? {
        model.encoder.embed_dim = d;
        model.tokenizer.embed_dim = d;
        model.encoder.heads = (d / 64).max(1);
    }
    if let Some(l) = cfg.pick("layers", a.layers)? {
        model.encoder.layers = l;
    }
    if let Some(h) = cfg.pick("heads", a.heads)? {
        model.encoder.heads = h;
    }
    if let Some(b) = cfg.pick("bottleneck", a.bottleneck)? {
        model.bottleneck = b;
    }
    if let Some(c) = cfg.pick("in_channels", a.in_channels)? {
        model.tokenizer.in_channels = c;
    }
    if let Some(g) = cfg.pick::<String>("pos_grid", a.pos_grid)? {
        model.pos_grid = parse_grid(&g)?;
    }
    let mode: AccountingMode = cfg
        .pick::<String>("mode", a.mode)?
        .unwrap_or_else(|| "full".into())
        .parse()
        .map_err(usage)?;
    let classes: Vec<usize> = match cfg.pick::<String>("classes", a.classes)? {
        Some(list) => list
            .split(',')
            .map(|c| c.trim().parse().map_err(|_| usage(format!("bad class count {c:?}"))))
            .collect::<Result<_, _>>()?,
        None => {
            let default_tasks = if mode == AccountingMode::FullFinetune || mode == AccountingMode::LinearProbe {
                1
            } else {
                3
            };
            reference_task_classes(cfg.pick("tasks", a.tasks)?.unwrap_or(default_tasks))
        }
    };
    if let Some(n) = cfg.pick::<usize>("tasks", a.tasks)? {
        if n != classes.len() {
            return Err(usage(format!("--tasks {n} disagrees with {} class counts", classes.len())));
        }
    }
    let report = param_report(&model, mode, &classes).map_err(usage)?;
    write_out(out, &format!("preset={preset}\n{report}\n"))
}

const RUN_FILE_KEYS: &[&str] = &[
    "mode",
    "tasks",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "noise",
    "attention",
    "classes",
    "embed_dim",
    "layers",
    "bottleneck",
];

/// Resolves a run configuration: flag, then config file, then (for the
/// seed) `FTACL_SEED`, then the reference defaults.
fn resolve_run_config(a: &RunArgs, config: Option<&Path>) -> Result<RunConfig, CliError> {
    let file = Layered::load(config, RUN_FILE_KEYS)?;
    let mode: TrainMode = file
        .pick::<String>("mode", a.mode.clone())?
        .unwrap_or_else(|| "adapter-inc".into())
        .parse()
        .map_err(usage)?;
    let seed = match file.pick("seed", a.seed)? {
        Some(s) => s,
        None => env_seed()?.unwrap_or(DEFAULT_SEED),
    };
    let mut kv: BTreeMap<String, String> = file.file.clone();
    kv.remove("mode");
    kv.insert("seed".into(), seed.to_string());
    let flags: [(&str, Option<String>); 10] = [
        ("tasks", a.tasks.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("noise", a.noise.map(|v| v.to_string())),
        ("attention", a.attention.clone()),
        ("classes", a.classes.map(|v| v.to_string())),
        ("embed_dim", a.embed_dim.map(|v| v.to_string())),
        ("layers", a.layers.map(|v| v.to_string())),
        ("bottleneck", a.bottleneck.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.insert(k.into(), v);
        }
    }
    let mut cfg = RunConfig::reference(mode, seed);
    cfg.apply(&kv).map_err(usage)?;
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create run directory {}: {e}", dir.display())))
}

fn cmd_ticl(a: RunArgs, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_run_config(&a, config)?;
    prepare_dir(&a.run_dir)?;
    let mut run = TiclRun::new(cfg.clone()).map_err(classify)?;
    let mut text = String::new();
    for spec in make_synthetic_tasks(&cfg.data, cfg.tasks).map_err(classify)? {
        let id = spec.id;
        let train = run.register_task(spec).map_err(classify)?;
        let log = run.train_task(id, &train, &cfg.train).map_err(classify)?;
        text.push_str(&format!(
            "task={id} final_loss={:.6} train_accuracy={:.6}\n",
            log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            log.train_accuracy
        ));
    }
    run.save(&a.run_dir).map_err(runtime)?;
    text.push_str(&run.evaluate_matrix().map_err(runtime)?.to_string());
    write_out(out, &text)
}

fn cmd_train(a: RunArgs, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let mut run = if a.run_dir.join("run.cfg").is_file() {
        TiclRun::load(&a.run_dir).map_err(runtime)?
    } else {
        let cfg = resolve_run_config(&a, config)?;
        prepare_dir(&a.run_dir)?;
        TiclRun::new(cfg).map_err(classify)?
    };
    let cfg = run.config().clone();
    let next = run.tasks().iter().filter(|t| t.trained).count();
    if next >= cfg.tasks {
        return Err(usage(format!("all {} tasks of this run are trained", cfg.tasks)));
    }
    let spec = make_synthetic_tasks(&cfg.data, cfg.tasks)
        .map_err(classify)?
        .swap_remove(next);
    let id = spec.id;
    let train = if run.tasks().iter().any(|t| t.id == id) {
        // registered by an earlier interrupted invocation
        spec.train
    } else {
        run.register_task(spec).map_err(classify)?
    };
    let log = run.train_task(id, &train, &cfg.train).map_err(classify)?;
    run.save(&a.run_dir).map_err(runtime)?;
    let losses: Vec<String> = log.epoch_losses.iter().map(|l| format!("{l:.6}")).collect();
    write_out(
        out,
        &format!(
            "task={id} epochs={} train_accuracy={:.6}\nlosses={}\n",
            log.epoch_losses.len(),
            log.train_accuracy,
            losses.join(",")
        ),
    )
}

fn cmd_eval(a: EvalArgs, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    Layered::load(config, &[])?;
    if !a.run_dir.join("run.cfg").is_file() {
        return Err(usage(format!("{} is not a run directory", a.run_dir.display())));
    }
    let run = TiclRun::load(&a.run_dir).map_err(runtime)?;
    if let Some(input) = &a.input {
        let id = a.task_id.ok_or_else(|| usage("--input needs --task-id"))?;
        let spec = Spectrogram::new(tensor_io::load(input).map_err(runtime)?).map_err(runtime)?;
        let logits = run.route_and_predict(&spec, id).map_err(classify)?;
        let values: Vec<String> = logits.data().iter().map(|v| format!("{v:.6}")).collect();
        let best = logits
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        return write_out(out, &format!("task={id} prediction={best} logits={}\n", values.join(",")));
    }
    let mut text = String::new();
    for task in run.tasks().iter().filter(|t| t.trained) {
        if a.task_id.is_some_and(|id| id != task.id) {
            continue;
        }
        let acc = run.accuracy(task.id, &task.test).map_err(runtime)?;
        text.push_str(&format!("task={} name={} test_accuracy={acc:.6}\n", task.id, task.name));
    }
    if let Some(id) = a.task_id {
        run.task(id).map_err(classify)?;
    }
    match run.evaluate_matrix() {
        Ok(report) => text.push_str(&report.to_string()),
        Err(_) => text.push_str("no trained tasks\n"),
    }
    write_out(out, &text)
}
