//! The `cmr` command line. Every command records a [`RunManifest`] beside
//! its outputs; `replay` re-executes a manifest into a new directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmr::Combine;
use crate::data::{evaluate, generate_corpus, read_jsonl, write_jsonl, Corpus, DataError, EventInstance, GeneratorConfig, MetricReport, Ontology, Prediction};
use crate::experiment::{self, ExperimentKind, ExperimentRow, COUNT_KS};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::model::{Checkpoint, Model, ModelConfig, ModelError, OptimizerKind, Variant};
use crate::pipeline::{self, evaluate_items, DemoOrder, InferenceConfig, PipelineError, Prepared, RetrievalMode, TrainConfig};
use crate::retrieval::Embedder;
use crate::verify::checks::{self, VerifyOptions, CHECK_NAMES};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    /// 1 for failed checks, 3 for numeric blow-ups, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Pipeline(PipelineError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cmr", version = crate::manifest::VERSION, about = "Compressive memory retrieval for event argument extraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Predict arguments for a split and score them.
    Infer(InferArgs),
    /// Score a predictions file against gold documents.
    Eval(EvalArgs),
    /// Run an evaluation sweep over trained checkpoints.
    Experiment(ExperimentArgs),
    /// Run the numerical and algorithmic checks.
    Verify(VerifyArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_train: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_dev: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_test: u64,
    #[arg(long, env = "CMR_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Event types and roles to generate; defaults to the built-in types.
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    /// Number of built-in types when no ontology is given.
    #[arg(long, default_value_t = 6)]
    pub num_types: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Variant::EncDec)]
    pub variant: Variant,
    /// Instances stored before the memory is reset.
    #[arg(long, default_value_t = 8)]
    pub max_retrieval: usize,
    /// Instances per parameter update.
    #[arg(long, default_value_t = 8)]
    pub grad_accum: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, env = "CMR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Combine::Mean)]
    pub combine: Combine,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Sgd)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    /// Share of each batch taken from other event types.
    #[arg(long, default_value_t = 0.2)]
    pub mix: f64,
    /// Gradient norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Train the retrieved-prefix baseline instead of the memory model.
    #[arg(long)]
    pub prefix: bool,
    /// Store each demonstration's filled template along with its context.
    #[arg(long)]
    pub store_target: bool,
    #[arg(long, default_value_t = 192)]
    pub max_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RetrievalArgs {
    /// Demonstrations per query.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub demo_batch: usize,
    #[arg(long, value_enum, default_value_t = RetrievalMode::Topk)]
    pub mode: RetrievalMode,
    #[arg(long, value_enum, default_value_t = DemoOrder::Normal)]
    pub order: DemoOrder,
    #[arg(long, value_enum, default_value_t = Combine::Mean)]
    pub combine: Combine,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
}

impl RetrievalArgs {
    fn config(&self, seed: u64) -> InferenceConfig {
        InferenceConfig {
            k: self.k,
            demo_batch_size: self.demo_batch,
            mode: self.mode,
            order: self.order,
            seed,
            combine: self.combine,
            max_new: self.max_new,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, env = "CMR_SEED", default_value_t = 0)]
    pub seed: u64,
    /// The checkpoint is a prefix-baseline model.
    #[arg(long)]
    pub prefix: bool,
    #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold documents (JSONL).
    #[arg(long)]
    pub gold: PathBuf,
    /// Write metrics.csv and a manifest here instead of printing only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub kind: ExperimentKind,
    /// Checkpoint path; `{seed}` is replaced by each seed.
    #[arg(long)]
    pub ckpt: String,
    /// Prefix-baseline checkpoint for the robustness sweep; `{seed}` as above.
    #[arg(long)]
    pub prefix_ckpt: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated seeds. Each selects a checkpoint and the retrieval seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Run only these checks.
    #[arg(long, value_delimiter = ',', value_parser = CHECK_NAMES)]
    pub only: Vec<String>,
    /// Retrieval denominator used by the memory checks.
    #[arg(long, default_value_t = crate::cmr::RETRIEVAL_EPSILON)]
    pub epsilon: f64,
    /// Random seeds per gradient check.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the replayed run.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and maps errors to
/// exit codes, printing them to stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => run_experiment(a),
        Command::Verify(a) => verify(a),
        Command::Replay(a) => replay(a),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::Data(e.into()))
}

fn out_dir(p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(p).map_err(DataError::from)?;
    absolute(p)
}

fn record<A: Serialize>(name: &str, args: &A, seed: u64, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
    let config = serde_json::to_value(args).map_err(|e| DataError::Io(e.into()))?;
    RunManifest::new(name, config, seed, outputs).write(dir)?;
    Ok(())
}

fn gen_data(mut a: GenDataArgs) -> Result<()> {
    a.ontology = a.ontology.as_deref().map(absolute).transpose()?;
    let dir = out_dir(&a.out)?;
    a.out = dir.clone();
    let ontology = a.ontology.as_deref().map(Ontology::load).transpose()?;
    let cfg = GeneratorConfig {
        seed: a.seed,
        n_train: a.n_train as usize,
        n_dev: a.n_dev as usize,
        n_test: a.n_test as usize,
        num_types: a.num_types,
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus(&cfg, ontology.as_ref()).map_err(|e| match e {
        DataError::Ontology(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    corpus.write(&dir)?;
    let outputs = ["train.jsonl", "dev.jsonl", "test.jsonl", "ontology.json"].map(|f| dir.join(f)).to_vec();
    record("gen-data", &a, a.seed, &dir, outputs)?;
    println!(
        "wrote {} train / {} dev / {} test documents to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}

fn train(mut a: TrainArgs) -> Result<()> {
    a.data = absolute(&a.data)?;
    let dir = out_dir(&a.out)?;
    a.out = dir.clone();
    if a.max_retrieval != a.grad_accum {
        eprintln!(
            "warning: --max-retrieval {} differs from --grad-accum {}; the memory reset and the parameter update fall out of step",
            a.max_retrieval, a.grad_accum
        );
    }
    let tcfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        grad_accum_steps: a.grad_accum,
        max_retrieval: a.max_retrieval,
        learning_rate: a.lr,
        warmup_ratio: a.warmup,
        seed: a.seed,
        mix_fraction: a.mix,
        combine: a.combine,
        optimizer: a.optimizer,
        clip_norm: a.clip,
        use_memory: !a.prefix,
        record_memory: false,
    };
    tcfg.validate()?;
    let corpus = Corpus::load(&a.data)?;
    let prep = Prepared::new(corpus, None, a.max_len, Embedder::default())?;
    let mut mcfg = ModelConfig::tiny(a.variant, prep.vocab.len(), a.seed);
    mcfg.max_seq_len = mcfg.max_seq_len.max(a.max_len);
    mcfg.store_target = a.store_target;
    let mut model = Model::new(mcfg)?;
    let examples = if a.prefix {
        prep.prefix_training_examples()?
    } else {
        prep.train.iter().map(|i| i.example.clone()).collect()
    };
    let types: Vec<&str> = prep.train.iter().map(|i| i.event_type.as_str()).collect();
    let report = pipeline::train(&mut model, &examples, &types, &tcfg)?;

    let ckpt = dir.join(CHECKPOINT_FILE);
    Checkpoint {
        model,
        vocab: prep.vocab.clone(),
        step: report.updates as u64,
    }
    .save(&ckpt)?;
    let log = dir.join(TRAIN_LOG_FILE);
    experiment::write_csv(&log, &report.log)?;
    record("train", &a, a.seed, &dir, vec![ckpt, log])?;
    println!(
        "trained {} updates; loss {:.4} -> {:.4}",
        report.updates,
        report.first_loss().unwrap_or(f64::NAN),
        report.tail_loss(1).unwrap_or(f64::NAN)
    );
    Ok(())
}

struct Loaded {
    model: Model,
    prep: Prepared,
}

fn load(ckpt: &Path, data: &Path) -> Result<Loaded> {
    let ck = Checkpoint::load(ckpt).map_err(|e| match e {
        ModelError::Io(io) => CliError::Usage(format!("cannot read checkpoint {}: {io}", ckpt.display())),
        other => other.into(),
    })?;
    let corpus = Corpus::load(data)?;
    let max_len = ck.model.config.max_seq_len;
    let prep = Prepared::new(corpus, Some(ck.vocab), max_len, Embedder::default())?;
    Ok(Loaded { model: ck.model, prep })
}

/// One metrics.csv row: the run's scores next to the same model without
/// demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: String,
    pub k: usize,
    pub order: DemoOrder,
    pub seed: u64,
    pub arg_i_f1: f64,
    pub arg_c_f1: f64,
    pub strict_f1: f64,
    pub relaxed_f1: f64,
    pub strict_f1_k0: f64,
    pub strict_f1_delta: f64,
}

fn infer(mut a: InferArgs) -> Result<()> {
    a.ckpt = absolute(&a.ckpt)?;
    a.data = absolute(&a.data)?;
    let dir = out_dir(&a.out)?;
    a.out = dir.clone();
    let Loaded { model, prep } = load(&a.ckpt, &a.data)?;
    let cfg = a.retrieval.config(a.seed);
    let items = match a.split.as_str() {
        "train" => &prep.train,
        "dev" => &prep.dev,
        _ => &prep.test,
    };
    let docs = prep.docs_for(&a.split);
    let out = evaluate_items(&model, &prep, items, docs, &cfg, a.prefix)?;
    let k0 = if cfg.k == 0 || cfg.mode == RetrievalMode::None {
        out.report
    } else {
        let base = InferenceConfig { k: 0, ..cfg.clone() };
        evaluate_items(&model, &prep, items, docs, &base, a.prefix)?.report
    };
    let preds = dir.join(PREDICTIONS_FILE);
    write_jsonl(&preds, &out.predictions)?;
    let row = metrics_row(&a, &out.report, &k0);
    let metrics = dir.join(METRICS_FILE);
    experiment::write_csv(&metrics, std::slice::from_ref(&row))?;
    record("infer", &a, a.seed, &dir, vec![preds, metrics])?;
    println!(
        "{} events: strict-F1 {:.2} (k=0 {:.2}, delta {:+.2}), {} ms",
        out.predictions.len(),
        100.0 * row.strict_f1,
        100.0 * row.strict_f1_k0,
        100.0 * row.strict_f1_delta,
        out.wall_ms
    );
    Ok(())
}

fn metrics_row(a: &InferArgs, r: &MetricReport, k0: &MetricReport) -> MetricsRow {
    let mode = match a.retrieval.mode {
        RetrievalMode::Topk => "topk",
        RetrievalMode::Random => "random",
        RetrievalMode::None => "none",
    };
    MetricsRow {
        mode: format!("{}-{mode}", if a.prefix { "prefix" } else { "cmr" }),
        k: a.retrieval.k,
        order: a.retrieval.order,
        seed: a.seed,
        arg_i_f1: r.arg_i.f1(),
        arg_c_f1: r.arg_c.f1(),
        strict_f1: r.strict.f1(),
        relaxed_f1: r.relaxed.f1(),
        strict_f1_k0: k0.strict.f1(),
        strict_f1_delta: r.strict.f1() - k0.strict.f1(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub metric: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn score_rows(r: &MetricReport) -> Vec<ScoreRow> {
    [("arg-i", r.arg_i), ("arg-c", r.arg_c), ("strict", r.strict), ("relaxed", r.relaxed)]
        .into_iter()
        .map(|(m, c)| ScoreRow {
            metric: m.to_string(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        })
        .collect()
}

fn eval(mut a: EvalArgs) -> Result<()> {
    a.pred = absolute(&a.pred)?;
    a.gold = absolute(&a.gold)?;
    let preds: Vec<Prediction> = read_jsonl(&a.pred)?;
    let gold: Vec<EventInstance> = read_jsonl(&a.gold)?;
    let rows = score_rows(&evaluate(&preds, &gold)?);
    for r in &rows {
        println!("{:<8} P {:6.2} R {:6.2} F1 {:6.2}", r.metric, 100.0 * r.precision, 100.0 * r.recall, 100.0 * r.f1);
    }
    if let Some(out) = &a.out {
        let dir = out_dir(out)?;
        a.out = Some(dir.clone());
        let metrics = dir.join(METRICS_FILE);
        experiment::write_csv(&metrics, &rows)?;
        record("eval", &a, 0, &dir, vec![metrics])?;
    }
    Ok(())
}

fn seeded(template: &str, seed: u64) -> PathBuf {
    PathBuf::from(template.replace("{seed}", &seed.to_string()))
}

fn run_experiment(mut a: ExperimentArgs) -> Result<()> {
    a.data = absolute(&a.data)?;
    a.ckpt = absolute(Path::new(&a.ckpt))?.to_string_lossy().into_owned();
    if let Some(p) = &a.prefix_ckpt {
        a.prefix_ckpt = Some(absolute(Path::new(p))?.to_string_lossy().into_owned());
    }
    let dir = out_dir(&a.out)?;
    a.out = dir.clone();
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    if a.kind == ExperimentKind::Robustness && a.retrieval.k == 0 {
        return Err(CliError::Usage("the robustness sweep needs --k > 0".into()));
    }
    let mut rows: Vec<ExperimentRow> = Vec::new();
    for &seed in &a.seeds {
        let Loaded { model, prep } = load(&seeded(&a.ckpt, seed), &a.data)?;
        let base = a.retrieval.config(seed);
        let mut cell = match a.kind {
            ExperimentKind::Count => experiment::count_sweep(&model, &prep, &COUNT_KS, &base)?,
            ExperimentKind::Order => experiment::order_sweep(&model, &prep, &base)?,
            ExperimentKind::Robustness => {
                let prefix = a
                    .prefix_ckpt
                    .as_ref()
                    .map(|p| Checkpoint::load(&seeded(p, seed)))
                    .transpose()?;
                experiment::robustness(&model, prefix.as_ref().map(|c| &c.model), &prep, &base)?
            }
        };
        for r in &cell {
            eprintln!(
                "seed {seed} {} k={} {:?}: strict-F1 {:.2} ({} ms)",
                r.mode,
                r.k,
                r.order,
                100.0 * r.strict_f1,
                r.wall_ms
            );
        }
        rows.append(&mut cell);
    }
    let mut all = rows.clone();
    all.extend(experiment::mean_rows(&rows));
    let name = match a.kind {
        ExperimentKind::Count => "count",
        ExperimentKind::Order => "order",
        ExperimentKind::Robustness => "robustness",
    };
    let csv = dir.join(format!("experiment_{name}.csv"));
    experiment::write_csv(&csv, &all)?;
    record("experiment", &a, a.seeds[0], &dir, vec![csv])?;
    for r in all.iter().filter(|r| r.seed == "mean") {
        println!("{} k={} {:?}: mean strict-F1 {:.2}", r.mode, r.k, r.order, 100.0 * r.strict_f1);
    }
    Ok(())
}

fn verify(mut a: VerifyArgs) -> Result<()> {
    let opts = VerifyOptions {
        only: a.only.clone(),
        epsilon: a.epsilon,
        seeds: a.seeds,
    };
    let results = checks::run(&opts);
    for r in &results {
        println!(
            "{} {:<16} max error {:.3e} (tolerance {:.0e}) {} ms{}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance,
            r.millis,
            if r.detail.is_empty() { String::new() } else { format!(": {}", r.detail) }
        );
    }
    if let Some(out) = &a.out {
        let dir = out_dir(out)?;
        a.out = Some(dir.clone());
        let report = dir.join("verify.json");
        let text = serde_json::to_string_pretty(&results).map_err(|e| DataError::Io(e.into()))?;
        fs::write(&report, text + "\n").map_err(DataError::from)?;
        record("verify", &a, 0, &dir, vec![report])?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (max error {:.3e})", r.name, r.max_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}

fn parse_config<A: for<'de> Deserialize<'de>>(m: &RunManifest) -> Result<A> {
    serde_json::from_value(m.config.clone())
        .map_err(|e| CliError::Usage(format!("manifest config does not fit `{}`: {e}", m.command)))
}

/// Rebuilds the recorded command with its output directory replaced.
pub fn command_from_manifest(m: &RunManifest, out: &Path) -> Result<Command> {
    let out = out.to_path_buf();
    Ok(match m.command.as_str() {
        "gen-data" => Command::GenData(GenDataArgs { out, ..parse_config(m)? }),
        "train" => Command::Train(TrainArgs { out, ..parse_config(m)? }),
        "infer" => Command::Infer(InferArgs { out, ..parse_config(m)? }),
        "eval" => Command::Eval(EvalArgs { out: Some(out), ..parse_config(m)? }),
        "experiment" => Command::Experiment(ExperimentArgs { out, ..parse_config(m)? }),
        "verify" => Command::Verify(VerifyArgs { out: Some(out), ..parse_config(m)? }),
        other => return Err(CliError::Usage(format!("cannot replay command `{other}`"))),
    })
}

fn replay(a: ReplayArgs) -> Result<()> {
    let path = if a.manifest.is_dir() { a.manifest.join(MANIFEST_FILE) } else { a.manifest.clone() };
    let m = RunManifest::load(&path)?;
    if m.version != crate::manifest::VERSION {
        eprintln!("warning: manifest written by {}, replaying with {}", m.version, crate::manifest::VERSION);
    }
    run(command_from_manifest(&m, &a.out)?)
}
