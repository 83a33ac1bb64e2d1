//! Command-line entry point: configuration loading with flag overrides,
//! run-directory and manifest plumbing, and the `pretrain`, `probe`,
//! `finetune`, `augstats`, `gradcheck`, and `bench` commands.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{ablation_pairs, standard_u_pipeline, standard_v_pipeline, splitmix64};
use crate::distill::{
    build_batch_views, student_loss, teacher_cls_softmax, train_step, CenterState, DistillConfig,
    StudentTeacherState,
};
use crate::evalkit::{
    finetune, linear_probe, load_or_create_split, Network, ProbeConfig, ProbeMode,
    ProbeReport,
};
use crate::mixer::{n_blocks, ForwardCtx, MixerConfig};
use crate::ndiff::{
    grad_check, load_checkpoint, save_checkpoint, AdamW, Checkpoint, NdiffError, ParamStore,
    Tensor,
};
use crate::seqcore::{
    parse_fasta_with, sample_windows, load_labeled_csv, FastaOptions, NucleotideSequence,
};

/// Errors split by exit code: usage/config problems exit 2, everything that
/// goes wrong while running exits 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    crate::seqcore::SeqError,
    crate::augment::AugmentError,
    crate::mixer::MixerError,
    crate::distill::DistillError,
    crate::evalkit::EvalError,
    crate::ndiff::CheckpointError,
    NdiffError,
    std::io::Error
);

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Data paths and corpus-shaping knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub num_classes: usize,
    /// Pretraining window length in bases.
    pub window: usize,
    pub windows_per_epoch: usize,
    /// Map IUPAC ambiguity codes to N while reading FASTA instead of failing.
    pub coerce_ambiguous_to_n: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            dataset: None,
            checkpoint: None,
            num_classes: 2,
            window: 1000,
            windows_per_epoch: 5000,
            coerce_ambiguous_to_n: false,
        }
    }
}

/// One resolved run: the published defaults unless a config file or a flag
/// says otherwise. The top-level seed drives every stream; the trainer and
/// probe seeds are derived from it at resolution time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub mixer: MixerConfig,
    pub distill: DistillConfig,
    pub probe: ProbeConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let distill = DistillConfig::reference_default();
        Self {
            seed: None,
            mixer: MixerConfig::reference_default(data.window + distill.cls_tokens),
            distill,
            probe: ProbeConfig::default(),
            data,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| usage(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Fill in the effective seed (flag > config file > FINDNA_SEED > 0) and
    /// propagate it to the sub-configs.
    pub fn resolve_seed(&mut self, flag: Option<u64>) {
        let env = std::env::var("FINDNA_SEED")
            .ok()
            .and_then(|v| v.parse().ok());
        let seed = flag.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        self.distill.seed = seed;
        // Shifted into i64 range so the config stays TOML-serializable.
        self.probe.seed = splitmix64(seed ^ 1) >> 1;
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mixer.validate().map_err(|e| usage(e.to_string()))?;
        self.distill.validate().map_err(|e| usage(e.to_string()))?;
        self.probe.validate().map_err(|e| usage(e.to_string()))?;
        if self.data.window == 0 {
            return Err(usage("data.window must be positive"));
        }
        let tokens = self.data.window + self.distill.cls_tokens;
        if tokens > self.mixer.max_tokens {
            return Err(usage(format!(
                "window {} + {} CLS tokens exceeds mixer.max_tokens {}",
                self.data.window, self.distill.cls_tokens, self.mixer.max_tokens
            )));
        }
        for (name, p) in [
            ("data.corpus", &self.data.corpus),
            ("data.dataset", &self.data.dataset),
            ("data.checkpoint", &self.data.checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(usage(format!("{name} file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Argument structs
// ---------------------------------------------------------------------------

#[derive(Debug, Args, Clone)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file and FINDNA_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run outputs.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

/// Flag overrides shared by the training-flavored commands.
#[derive(Debug, Args, Clone)]
struct ModelOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    cls_tokens: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    windows_per_epoch: Option<usize>,
    /// Reconstruction-only preset: alpha = 1, contrastive branch off.
    #[arg(long)]
    mnm_only: bool,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.mnm_only {
            cfg.distill = DistillConfig {
                cls_tokens: cfg.distill.cls_tokens,
                seed: cfg.distill.seed,
                ..DistillConfig::mnm_only()
            };
        }
        if let Some(v) = self.epochs {
            cfg.distill.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.distill.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.distill.base_lr = v;
        }
        if let Some(v) = self.cls_tokens {
            cfg.distill.cls_tokens = v;
        }
        if let Some(v) = self.channels {
            cfg.mixer.channels = v;
        }
        if let Some(v) = self.hidden {
            cfg.mixer.hidden = v;
        }
        if let Some(v) = self.layers {
            cfg.mixer.num_layers = v;
        }
        if let Some(v) = self.window {
            cfg.data.window = v;
        }
        if let Some(v) = self.windows_per_epoch {
            cfg.data.windows_per_epoch = v;
        }
        if self.window.is_some() || self.cls_tokens.is_some() {
            cfg.mixer.max_tokens = cfg.data.window + cfg.distill.cls_tokens;
        }
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelOverrides,
    /// FASTA corpus to sample pretraining windows from.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    coerce_ambiguous_to_n: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Pretrained checkpoint produced by `pretrain`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `sequence,label` CSV.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, value_enum)]
    network: Option<NetworkArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum NetworkArg {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
struct AugstatsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of windows to average the dissimilarity over.
    #[arg(long, default_value_t = 1000)]
    windows: usize,
    #[arg(long)]
    window: Option<usize>,
    /// Fail (exit 1) unless the named pair has the strictly smallest value.
    #[arg(long)]
    assert_min: Option<String>,
    #[arg(long)]
    coerce_ambiguous_to_n: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Maximum allowed relative error per parameter.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelOverrides,
    /// Measured batches per mode (after one warmup batch).
    #[arg(long, default_value_t = 3)]
    batches: usize,
}

#[derive(Debug, Args)]
struct BenchWorkerArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: String,
    #[arg(long)]
    batches: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Self-distillation pretraining over FASTA windows.
    Pretrain(PretrainArgs),
    /// Linear probing with a frozen pretrained backbone.
    Probe(EvalArgs),
    /// Full fine-tuning of backbone plus head.
    Finetune(EvalArgs),
    /// Per-pipeline-pair view dissimilarity table.
    Augstats(AugstatsArgs),
    /// Finite-difference check of the full training gradient.
    Gradcheck(GradcheckArgs),
    /// Per-batch time / peak memory for the full and reconstruction-only modes.
    Bench(BenchArgs),
    /// Internal: single-mode bench body run in a child process so peak RSS
    /// is measured per mode.
    #[command(hide = true)]
    BenchWorker(BenchWorkerArgs),
}

#[derive(Debug, Parser)]
#[command(name = "findna", version, about = "Self-distillation pretraining for DNA sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_eval(a, ProbeMode::LinearProbe),
        Command::Finetune(a) => cmd_eval(a, ProbeMode::Finetune),
        Command::Augstats(a) => cmd_augstats(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::BenchWorker(a) => cmd_bench_worker(a),
    }
}

// ---------------------------------------------------------------------------
// Run directory and manifest
// ---------------------------------------------------------------------------

fn config_digest(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("serializable config");
    let hash = Sha256::digest(json.as_bytes());
    hash.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

fn make_run_dir(out_dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let dir = out_dir.join(format!("{command}-{ts}-{}", config_digest(cfg)));
    fs::create_dir_all(&dir)?;
    let manifest = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed(),
        "config": cfg,
    });
    fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable manifest"),
    )?;
    Ok(dir)
}

fn maybe_print_config(common: &CommonArgs, cfg: &RunConfig) -> Result<bool, CliError> {
    if common.print_config {
        let text = toml::to_string_pretty(cfg)
            .map_err(|e| CliError::Runtime(format!("config serialization: {e}")))?;
        println!("{text}");
        return Ok(true);
    }
    Ok(false)
}

// ---------------------------------------------------------------------------
// Checkpoint layout
// ---------------------------------------------------------------------------

fn state_to_checkpoint(
    state: &StudentTeacherState,
    center: &CenterState,
    cfg: &RunConfig,
) -> Checkpoint {
    let mut tensors = Vec::new();
    for (name, t) in state.student.entries() {
        tensors.push((format!("student.{name}"), t));
    }
    for (name, t) in state.teacher.entries() {
        tensors.push((format!("teacher.{name}"), t));
    }
    tensors.push(("center.xi".to_string(), center.xi.clone()));
    tensors.push(("trainer.step".to_string(), Tensor::scalar(state.step as f64)));
    Checkpoint {
        tensors,
        meta: serde_json::to_string(cfg).expect("serializable config"),
    }
}

fn store_from(entries: Vec<(String, Tensor)>) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, t) in entries {
        store.insert(name, t);
    }
    store
}

/// Read a pretraining checkpoint back into live state plus its config echo.
pub fn load_pretrained(
    path: &Path,
) -> Result<(RunConfig, StudentTeacherState, CenterState), CliError> {
    let ckpt = load_checkpoint(path)?;
    let cfg: RunConfig = serde_json::from_str(&ckpt.meta)
        .map_err(|e| CliError::Runtime(format!("checkpoint meta: {e}")))?;
    let student = store_from(ckpt.with_prefix("student."));
    let teacher = store_from(ckpt.with_prefix("teacher."));
    if student.is_empty() || !student.same_structure(&teacher) {
        return Err(CliError::Runtime(format!(
            "checkpoint {} has inconsistent student/teacher parameters",
            path.display()
        )));
    }
    let step = ckpt
        .get("trainer.step")
        .map(|t| t.item() as usize)
        .unwrap_or(0);
    let xi = ckpt
        .get("center.xi")
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(vec![cfg.distill.cls_tokens, cfg.mixer.channels]));
    Ok((
        cfg.clone(),
        StudentTeacherState {
            student,
            teacher,
            step,
        },
        CenterState {
            xi,
            beta: cfg.distill.beta,
        },
    ))
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn read_corpus(path: &Path, coerce: bool) -> Result<Vec<NucleotideSequence>, CliError> {
    Ok(parse_fasta_with(
        path,
        FastaOptions {
            coerce_ambiguous_to_n: coerce,
        },
    )?)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    args.model.apply(&mut cfg);
    if let Some(c) = &args.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    if args.coerce_ambiguous_to_n {
        cfg.data.coerce_ambiguous_to_n = true;
    }
    cfg.resolve_seed(args.common.seed);
    cfg.validate()?;
    if maybe_print_config(&args.common, &cfg)? {
        return Ok(());
    }
    let corpus_path = cfg
        .data
        .corpus
        .clone()
        .ok_or_else(|| usage("pretrain requires --corpus or data.corpus"))?;
    let genome = read_corpus(&corpus_path, cfg.data.coerce_ambiguous_to_n)?;
    let run_dir = make_run_dir(&args.common.out_dir, "pretrain", &cfg)?;
    let seed = cfg.seed();

    let mut state = StudentTeacherState::init(&cfg.mixer, seed)?;
    let mut center = CenterState::zeros(cfg.distill.cls_tokens, cfg.mixer.channels, cfg.distill.beta);
    let mut opt = AdamW::new(&state.student, cfg.distill.weight_decay);
    let u_pipe = standard_u_pipeline(splitmix64(seed ^ u64_from(b"uview")));
    let v_pipe = standard_v_pipeline(splitmix64(seed ^ u64_from(b"vview")));

    let steps_per_epoch = cfg.data.windows_per_epoch.div_ceil(cfg.distill.batch_size);
    let total_steps = (cfg.distill.epochs * steps_per_epoch).max(1);
    let ckpt_path = run_dir.join("checkpoint.fdna");

    let mut csv = fs::File::create(run_dir.join("loss.csv"))?;
    writeln!(csv, "step,lr,lambda,mnm,cl,total")?;

    for epoch in 0..cfg.distill.epochs {
        let windows = sample_windows(
            &genome,
            cfg.data.window,
            cfg.data.windows_per_epoch,
            splitmix64(seed.wrapping_add(epoch as u64)),
        )?;
        for batch in windows.chunks(cfg.distill.batch_size) {
            let rec = train_step(
                batch,
                &u_pipe,
                &v_pipe,
                &mut state,
                &mut center,
                &mut opt,
                &cfg.mixer,
                &cfg.distill,
                total_steps,
            )?;
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                rec.step, rec.lr, rec.lambda, rec.mnm, rec.cl, rec.total
            )?;
        }
        save_checkpoint(&ckpt_path, &state_to_checkpoint(&state, &center, &cfg))?;
        eprintln!("epoch {} of {} done", epoch + 1, cfg.distill.epochs);
    }
    if cfg.distill.epochs == 0 {
        save_checkpoint(&ckpt_path, &state_to_checkpoint(&state, &center, &cfg))?;
    }
    println!("{}", ckpt_path.display());
    Ok(())
}

/// Little-endian u64 from a short tag, for deriving named seed streams.
#[allow(non_snake_case)]
fn u64_from(tag: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b[..tag.len().min(8)].copy_from_slice(&tag[..tag.len().min(8)]);
    u64::from_le_bytes(b)
}

// ---------------------------------------------------------------------------
// probe / finetune
// ---------------------------------------------------------------------------

fn write_report(run_dir: &Path, report: &ProbeReport) -> Result<(), CliError> {
    fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(report).expect("serializable report"),
    )?;
    let mut csv = fs::File::create(run_dir.join("report.csv"))?;
    writeln!(
        csv,
        "mode,network,representation,top1_accuracy,mcc,f1_macro,majority_baseline"
    )?;
    writeln!(
        csv,
        "{:?},{:?},{:?},{},{},{},{}",
        report.mode,
        report.network,
        report.representation,
        report.top1_accuracy,
        report.mcc,
        report.f1_macro,
        report.majority_baseline
    )?;
    Ok(())
}

fn cmd_eval(args: EvalArgs, mode: ProbeMode) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(p) = &args.checkpoint {
        cfg.data.checkpoint = Some(p.clone());
    }
    if let Some(p) = &args.dataset {
        cfg.data.dataset = Some(p.clone());
    }
    if let Some(n) = args.num_classes {
        cfg.data.num_classes = n;
    }
    cfg.probe.mode = mode;
    if let Some(n) = args.network {
        cfg.probe.network = match n {
            NetworkArg::Teacher => Network::Teacher,
            NetworkArg::Student => Network::Student,
        };
    }
    if let Some(v) = args.epochs {
        cfg.probe.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.probe.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.probe.lr = v;
    }
    cfg.resolve_seed(args.common.seed);
    let ckpt_path = cfg
        .data
        .checkpoint
        .clone()
        .ok_or_else(|| usage("this command requires --checkpoint"))?;
    if !ckpt_path.exists() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            ckpt_path.display()
        )));
    }
    let dataset_path = cfg
        .data
        .dataset
        .clone()
        .ok_or_else(|| usage("this command requires --dataset"))?;
    if !dataset_path.exists() {
        return Err(usage(format!(
            "dataset {} does not exist",
            dataset_path.display()
        )));
    }
    cfg.probe.validate().map_err(|e| usage(e.to_string()))?;
    if maybe_print_config(&args.common, &cfg)? {
        return Ok(());
    }

    // The checkpoint's architecture echo is authoritative for the backbone.
    let (train_cfg, state, _center) = load_pretrained(&ckpt_path)?;
    let dataset = load_labeled_csv(&dataset_path, cfg.data.num_classes)?;
    let mut split_path = dataset_path.clone().into_os_string();
    split_path.push(".split.json");
    let split = load_or_create_split(&split_path, dataset.records.len(), cfg.seed())?;
    let backbone = match cfg.probe.network {
        Network::Teacher => &state.teacher,
        Network::Student => &state.student,
    };
    let run_dir = make_run_dir(&args.common.out_dir, command_name(mode), &cfg)?;
    let report = match mode {
        ProbeMode::LinearProbe => linear_probe(
            &dataset,
            &split,
            backbone,
            &train_cfg.mixer,
            train_cfg.distill.cls_tokens,
            &cfg.probe,
        )?,
        ProbeMode::Finetune => {
            let (report, params) = finetune(
                &dataset,
                &split,
                backbone,
                &train_cfg.mixer,
                train_cfg.distill.cls_tokens,
                &cfg.probe,
            )?;
            let mut tensors = Vec::new();
            for (name, t) in params.entries() {
                tensors.push((format!("finetuned.{name}"), t));
            }
            save_checkpoint(
                run_dir.join("finetuned.fdna"),
                &Checkpoint {
                    tensors,
                    meta: serde_json::to_string(&cfg).expect("serializable config"),
                },
            )?;
            report
        }
    };
    write_report(&run_dir, &report)?;
    println!(
        "{} top1={:.4} mcc={:.4} f1={:.4} (majority {:.4}) -> {}",
        command_name(mode),
        report.top1_accuracy,
        report.mcc,
        report.f1_macro,
        report.majority_baseline,
        run_dir.display()
    );
    Ok(())
}

fn command_name(mode: ProbeMode) -> &'static str {
    match mode {
        ProbeMode::LinearProbe => "probe",
        ProbeMode::Finetune => "finetune",
    }
}

// ---------------------------------------------------------------------------
// augstats
// ---------------------------------------------------------------------------

fn cmd_augstats(args: AugstatsArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    if let Some(c) = &args.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    if let Some(w) = args.window {
        cfg.data.window = w;
        cfg.mixer.max_tokens = w + cfg.distill.cls_tokens;
    }
    if args.coerce_ambiguous_to_n {
        cfg.data.coerce_ambiguous_to_n = true;
    }
    cfg.resolve_seed(args.common.seed);
    if maybe_print_config(&args.common, &cfg)? {
        return Ok(());
    }
    let corpus_path = cfg
        .data
        .corpus
        .clone()
        .ok_or_else(|| usage("augstats requires --corpus or data.corpus"))?;
    if !corpus_path.exists() {
        return Err(usage(format!(
            "corpus {} does not exist",
            corpus_path.display()
        )));
    }
    let genome = read_corpus(&corpus_path, cfg.data.coerce_ambiguous_to_n)?;
    let seed = cfg.seed();
    let windows = sample_windows(&genome, cfg.data.window, args.windows, splitmix64(seed))?;
    let run_dir = make_run_dir(&args.common.out_dir, "augstats", &cfg)?;

    let mut table: Vec<(String, f64)> = Vec::new();
    for (name, u_pipe, v_pipe) in ablation_pairs(seed) {
        let mut acc = 0.0;
        for w in &windows {
            let u = u_pipe.apply(w)?;
            let v = v_pipe.apply(w)?;
            acc += crate::augment::kl_dissimilarity(&u.matrix, &v.matrix)?;
        }
        table.push((name, acc / windows.len() as f64));
    }

    let mut csv = fs::File::create(run_dir.join("kl.csv"))?;
    writeln!(csv, "pair,kl_divergence")?;
    for (name, kl) in &table {
        writeln!(csv, "{name},{kl}")?;
        println!("{name}\t{kl:.6}");
    }

    if let Some(want_min) = &args.assert_min {
        let target = table
            .iter()
            .find(|(n, _)| n == want_min)
            .ok_or_else(|| usage(format!("unknown pair '{want_min}' for --assert-min")))?;
        for (name, kl) in &table {
            if name != want_min && *kl <= target.1 {
                return Err(CliError::Runtime(format!(
                    "--assert-min violated: {name} ({kl:.6}) <= {want_min} ({:.6})",
                    target.1
                )));
            }
        }
        println!("assert-min holds: {want_min} is the strict minimum");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn random_sequences(count: usize, len: usize, seed: u64) -> Vec<NucleotideSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let bases: String = (0..len)
                .map(|_| ['A', 'C', 'G', 'T'][rng.gen_range(0..4)])
                .collect();
            NucleotideSequence::new(format!("w{i}"), bases).expect("ACGT only")
        })
        .collect()
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let seed = args
        .common
        .seed
        .or_else(|| std::env::var("FINDNA_SEED").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0);
    // Micro model: small enough for per-entry central differences, large
    // enough to exercise every primitive in the training loss.
    let mixer_cfg = MixerConfig {
        channels: 8,
        hidden: 16,
        num_layers: 1,
        max_tokens: 18,
        dropout: 0.0,
        layer_norm: true,
    };
    let distill_cfg = DistillConfig {
        cls_tokens: 2,
        seed,
        ..DistillConfig::reference_default()
    };
    let batch = random_sequences(2, 16, seed);
    let state = StudentTeacherState::init(&mixer_cfg, seed)?;
    let center = CenterState::zeros(2, mixer_cfg.channels, distill_cfg.beta);
    let views = build_batch_views(
        &batch,
        &standard_u_pipeline(splitmix64(seed ^ 2)),
        &standard_v_pipeline(splitmix64(seed ^ 3)),
        &distill_cfg,
        0,
    )?;
    let q_hats: Vec<Tensor> = {
        let v_input = views.v_input.as_ref().expect("contrastive branch on");
        let q_raw = teacher_cls_raw(v_input, &state.teacher, &mixer_cfg, 16, 2)?;
        q_raw
            .iter()
            .map(|q| {
                teacher_cls_softmax(q, &center, distill_cfg.tau_t, distill_cfg.cl_softmax_axis)
            })
            .collect::<Result<_, _>>()?
    };
    let mut params = state.student.clone();
    let report = grad_check(
        &mut params,
        |p, tape| {
            let mut ctx = ForwardCtx::inference();
            let (_, _, total) =
                student_loss(tape, &views, &q_hats, p, &mixer_cfg, &distill_cfg, &mut ctx)
                    .map_err(|e| NdiffError::ShapeMismatch {
                        primitive: "student_loss",
                        detail: e.to_string(),
                    })?;
            Ok(total)
        },
        args.step,
        args.tolerance,
    )?;
    for check in &report.per_param {
        println!(
            "{}\trel_err={:.3e}\tabs_err={:.3e}",
            check.name, check.max_rel_err, check.max_abs_err
        );
    }
    if let Some(worst) = report.worst() {
        println!(
            "worst: {} rel_err={:.3e} (tolerance {:.1e})",
            worst.name, worst.max_rel_err, args.tolerance
        );
    }
    if report.passed {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::Runtime("gradcheck failed".into()))
    }
}

/// Teacher CLS rows via a scratch inference pass (shared with bench).
fn teacher_cls_raw(
    input: &Tensor,
    params: &ParamStore,
    mixer_cfg: &MixerConfig,
    l: usize,
    k: usize,
) -> Result<Vec<Tensor>, CliError> {
    use crate::mixer::mixer_forward;
    use crate::ndiff::Tape;
    let batch = input.shape()[0];
    let n = l + k;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let mut ctx = ForwardCtx::inference();
    let out = mixer_forward(&mut tape, params, mixer_cfg, x, &mut ctx)?;
    let channels = *tape.shape(out).last().unwrap();
    let data = tape.value(out).data();
    Ok((0..batch)
        .map(|b| {
            let start = (b * n + l) * channels;
            Tensor::new(vec![k, channels], data[start..start + k * channels].to_vec())
        })
        .collect())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

/// Analytic matmul FLOPs for one forward pass of the student (and, with the
/// contrastive branch, the teacher): 2*m*k*n per matrix product.
pub fn forward_matmul_flops(
    mixer_cfg: &MixerConfig,
    batch: usize,
    tokens: usize,
    masked_rows: usize,
    contrastive: bool,
) -> u64 {
    let b = batch as u64;
    let n = tokens as u64;
    let i = mixer_cfg.channels as u64;
    let h = mixer_cfg.hidden as u64;
    let proj = 2 * b * n * 5 * i;
    let blocks = (mixer_cfg.num_layers * n_blocks(tokens)) as u64;
    let mlp = blocks * (2 * b * n * i * h + 2 * b * n * h * i);
    let head = 2 * masked_rows as u64 * i * 5;
    let one_body = proj + mlp;
    if contrastive {
        2 * one_body + head
    } else {
        one_body + head
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchRow {
    mode: String,
    mean_ms_per_batch: f64,
    peak_rss_kb: u64,
    forward_matmul_gflops_per_batch: f64,
}

fn peak_rss_kb() -> u64 {
    let status = fs::read_to_string("/proc/self/status").unwrap_or_default();
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            return rest
                .trim()
                .trim_end_matches(" kB")
                .trim()
                .parse()
                .unwrap_or(0);
        }
    }
    0
}

fn bench_default_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.mixer = MixerConfig {
        channels: 64,
        hidden: 128,
        num_layers: 2,
        max_tokens: 260,
        dropout: 0.1,
        layer_norm: true,
    };
    cfg.distill.cls_tokens = 4;
    cfg.distill.batch_size = 8;
    cfg.data.window = 256;
    cfg
}

fn cmd_bench_worker(args: BenchWorkerArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| usage(format!("bench config: {e}")))?;
    if args.mode == "cm_mnm" {
        cfg.distill.alpha = 1.0;
        cfg.distill.contrastive = false;
    }
    cfg.validate()?;
    let seed = cfg.seed();
    let batch_size = cfg.distill.batch_size;
    let windows = random_sequences(batch_size * (args.batches + 1), cfg.data.window, seed);
    let mut state = StudentTeacherState::init(&cfg.mixer, seed)?;
    let mut center =
        CenterState::zeros(cfg.distill.cls_tokens, cfg.mixer.channels, cfg.distill.beta);
    let mut opt = AdamW::new(&state.student, cfg.distill.weight_decay);
    let u_pipe = standard_u_pipeline(splitmix64(seed ^ 2));
    let v_pipe = standard_v_pipeline(splitmix64(seed ^ 3));
    let total_steps = args.batches + 1;

    let mut times_ms = Vec::new();
    let mut masked_rows = 0usize;
    for (i, batch) in windows.chunks(batch_size).enumerate() {
        let t0 = Instant::now();
        train_step(
            batch,
            &u_pipe,
            &v_pipe,
            &mut state,
            &mut center,
            &mut opt,
            &cfg.mixer,
            &cfg.distill,
            total_steps,
        )?;
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        if i > 0 {
            // Skip the warmup batch: first-touch allocation dominates it.
            times_ms.push(elapsed);
        }
        masked_rows = batch_size * (cfg.data.window as f64 * 0.3) as usize;
    }
    let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len().max(1) as f64;
    let flops = forward_matmul_flops(
        &cfg.mixer,
        batch_size,
        cfg.data.window + cfg.distill.cls_tokens,
        masked_rows,
        cfg.distill.contrastive,
    );
    let row = BenchRow {
        mode: args.mode,
        mean_ms_per_batch: mean_ms,
        peak_rss_kb: peak_rss_kb(),
        forward_matmul_gflops_per_batch: flops as f64 / 1e9,
    };
    println!("{}", serde_json::to_string(&row).expect("serializable row"));
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let mut cfg = match &args.common.config {
        Some(p) => RunConfig::load(Some(p))?,
        None => bench_default_config(),
    };
    args.model.apply(&mut cfg);
    cfg.resolve_seed(args.common.seed);
    cfg.validate()?;
    if maybe_print_config(&args.common, &cfg)? {
        return Ok(());
    }
    let run_dir = make_run_dir(&args.common.out_dir, "bench", &cfg)?;
    let cfg_path = run_dir.join("bench_config.toml");
    fs::write(
        &cfg_path,
        toml::to_string_pretty(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;

    let exe = std::env::current_exe()?;
    let mut rows = Vec::new();
    for mode in ["findna", "cm_mnm"] {
        let output = std::process::Command::new(&exe)
            .args([
                "bench-worker",
                "--config",
                &cfg_path.display().to_string(),
                "--mode",
                mode,
                "--batches",
                &args.batches.to_string(),
            ])
            .output()?;
        if !output.status.success() {
            return Err(CliError::Runtime(format!(
                "bench worker for {mode} failed: {}",
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let line = stdout
            .lines()
            .last()
            .ok_or_else(|| CliError::Runtime("empty bench worker output".into()))?;
        let row: BenchRow = serde_json::from_str(line)
            .map_err(|e| CliError::Runtime(format!("bench worker output: {e}")))?;
        rows.push(row);
    }

    let mut csv = fs::File::create(run_dir.join("bench.csv"))?;
    writeln!(
        csv,
        "mode,mean_ms_per_batch,peak_rss_kb,forward_matmul_gflops_per_batch"
    )?;
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            row.mode, row.mean_ms_per_batch, row.peak_rss_kb, row.forward_matmul_gflops_per_batch
        )?;
        println!(
            "{}\t{:.2} ms/batch\t{} kB peak\t{:.3} GFLOP/batch",
            row.mode, row.mean_ms_per_batch, row.peak_rss_kb, row.forward_matmul_gflops_per_batch
        );
    }
    if rows.len() == 2 {
        println!(
            "cm_mnm / findna time ratio: {:.3}",
            rows[1].mean_ms_per_batch / rows[0].mean_ms_per_batch
        );
    }
    println!("{}", run_dir.display());
    Ok(())
}
