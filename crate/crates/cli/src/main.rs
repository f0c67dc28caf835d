//! `hetgnn`: corpus generation, pre-training, fine-tuning, prediction and
//! the experiment matrix.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

mod layered;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use hetgnn_pretrain::corpusgen::{generate, preset, GenConfig};
use hetgnn_pretrain::encoder::{load_checkpoint, save_checkpoint, LoadOptions, Readout};
use hetgnn_pretrain::eval::{
    confusion_and_metrics, cross_validate, render_table, run_experiment, ExperimentConfig,
};
use hetgnn_pretrain::hetgraph::{read_corpus, write_corpus, Corpus, HeteroGraph};
use hetgnn_pretrain::trainer::{finetune, predict, pretrain, Objective, RunLog, TrainConfig};

use layered::layer_file;

#[derive(Parser)]
#[command(name = "hetgnn", version, about = "Heterogeneous graph transformer pre-training for fake news detection")]
struct Cli {
    /// Print resolved configs and progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Corpusgen(CorpusgenArgs),
    /// Self-supervised pre-training.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning on labelled graphs.
    Finetune(FinetuneArgs),
    /// Per-graph class probabilities from a checkpoint.
    Predict(PredictArgs),
    /// Metrics of a checkpoint on a labelled corpus, or k-fold fine-tuning.
    Evaluate(EvaluateArgs),
    /// Pre-training matrix with cross-validated fine-tuning.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct CorpusgenArgs {
    /// Named preset (pol_like, gos_like, pol_tiny, gos_tiny).
    #[arg(long)]
    preset: Option<String>,
    /// JSON file with generator fields; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    n_graphs: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    label_balance: Option<f64>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    space_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with training fields; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// RunLog path [default: <out> with extension .runlog.json]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Epochs [default: 50; 25 for retweet-count on corpora of at most 1000 graphs]
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    /// Classification readout without the article embedding.
    #[arg(long)]
    pools_only: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// node-mask, context-pred or retweet-count.
    #[arg(long)]
    objective: String,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Keep the task heads of the initial checkpoint.
    #[arg(long)]
    no_head_reinit: bool,
    /// Fine-tune on this many graphs sampled by seed.
    #[arg(long)]
    train_count: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Score this checkpoint; without it, run k-fold fine-tuning from scratch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    kfold: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Fine-tuning epochs for k-fold mode.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long)]
    train_count: Option<usize>,
    /// Output JSON [default: stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON file with experiment fields; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus for self-supervised pre-training.
    #[arg(long)]
    pretrain: PathBuf,
    /// Labelled corpus for cross-validated fine-tuning.
    #[arg(long)]
    finetune: PathBuf,
    /// Report JSON.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Plain-text table [default: stdout]
    #[arg(long)]
    table: Option<PathBuf>,
    /// Add a report fine-tuning on this many graphs per fold.
    #[arg(long)]
    low_resource: Option<usize>,
    /// Skip the report that fine-tunes on every training graph.
    #[arg(long)]
    no_full: bool,
    /// Start every setup from scratch.
    #[arg(long)]
    no_pretraining: bool,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Node-level pre-training epochs [default: 50]
    #[arg(long)]
    node_epochs: Option<usize>,
    /// Graph-level pre-training epochs [default: 25 up to 1000 graphs, else 50]
    #[arg(long)]
    graph_epochs: Option<usize>,
    /// Fine-tuning epochs; 0 evaluates the initial model [default: 50]
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Data(String),
}

type Res<T> = Result<T, Failure>;

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn load(path: &Path) -> Res<Corpus> {
    read_corpus(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Res<()> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn note<T: Serialize>(verbose: bool, what: &str, value: &T) {
    if verbose {
        eprintln!("{what}: {}", serde_json::to_string(value).unwrap_or_default());
    }
}

fn corpusgen(a: &CorpusgenArgs, m: &ArgMatches, verbose: bool) -> Res<()> {
    let base = match &a.preset {
        Some(p) => preset(p).map_err(|e| Failure::Usage(format!("--preset: {e}")))?,
        None => GenConfig::default(),
    };
    let mut cfg: GenConfig = layer_file(base, a.config.as_deref())?;
    if explicit(m, "seed") || a.config.is_none() {
        cfg.seed = a.seed;
    }
    macro_rules! over {
        ($($f:ident),*) => {$(if let Some(v) = a.$f.clone() { cfg.$f = v; })*};
    }
    over!(name, n_graphs, feature_dim, label_balance, signal_strength, domain_shift, space_seed);
    note(verbose, "generator config", &cfg);
    let corpus = generate(&cfg).map_err(data)?;
    write_corpus(&corpus, &a.out).map_err(data)
}

fn train_config(a: &TrainArgs, m: &ArgMatches, objective: Objective) -> Res<TrainConfig> {
    let mut cfg: TrainConfig = layer_file(TrainConfig::default(), a.config.as_deref())?;
    cfg.objective = objective;
    let from_cli = |id: &str| explicit(m, id) || a.config.is_none();
    if from_cli("batch_size") {
        cfg.batch_size = a.batch_size;
    }
    if from_cli("lr") {
        cfg.lr = a.lr;
    }
    if from_cli("seed") {
        cfg.seed = a.seed;
    }
    if from_cli("hidden_dim") {
        cfg.encoder.hidden_dim = a.hidden_dim;
    }
    if from_cli("n_layers") {
        cfg.encoder.n_layers = a.n_layers;
    }
    if from_cli("n_heads") {
        cfg.encoder.n_heads = a.n_heads;
    }
    if a.pools_only {
        cfg.encoder.readout = Readout::PoolsOnly;
    }
    if a.epochs.is_some() {
        cfg.epochs = a.epochs;
    }
    if a.init.is_some() {
        cfg.init_checkpoint = a.init.clone();
    }
    if cfg.epochs == Some(0) {
        return Err(Failure::Usage("--epochs must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Failure::Usage("--batch-size must be at least 1".into()));
    }
    Ok(cfg)
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| a.out.with_extension("runlog.json"))
}

fn finish_training(
    a: &TrainArgs,
    model: &hetgnn_pretrain::encoder::Model,
    mut log: RunLog,
    verbose: bool,
) -> Res<()> {
    save_checkpoint(model, &a.out).map_err(data)?;
    log.checkpoint = Some(a.out.clone());
    if verbose {
        for e in &log.epochs {
            eprintln!("epoch {:>3}  loss {:.6}  {:.2}s", e.epoch, e.mean_loss, e.seconds);
        }
    }
    write_json(&log, Some(&log_path(a)))
}

fn pretrain_cmd(a: &PretrainArgs, m: &ArgMatches, verbose: bool) -> Res<()> {
    let objective = Objective::parse(&a.objective)
        .filter(|o| *o != Objective::Finetune)
        .ok_or_else(|| {
            Failure::Usage(format!(
                "--objective: unknown pre-training objective `{}` (node-mask, context-pred, retweet-count)",
                a.objective
            ))
        })?;
    let cfg = train_config(&a.train, m, objective)?;
    note(verbose, "training config", &cfg);
    let corpus = load(&a.train.corpus)?;
    let graphs: Vec<&HeteroGraph> = corpus.graphs.iter().collect();
    let (model, log) = pretrain(&graphs, &cfg, None).map_err(data)?;
    finish_training(&a.train, &model, log, verbose)
}

fn finetune_cmd(a: &FinetuneArgs, m: &ArgMatches, verbose: bool) -> Res<()> {
    let mut cfg = train_config(&a.train, m, Objective::Finetune)?;
    if a.no_head_reinit {
        cfg.head_reinit = false;
    }
    if a.train_count.is_some() {
        cfg.train_count = a.train_count;
    }
    note(verbose, "training config", &cfg);
    let corpus = load(&a.train.corpus)?;
    let graphs: Vec<&HeteroGraph> = corpus.graphs.iter().collect();
    let (model, log) = finetune(&graphs, &cfg, None).map_err(data)?;
    finish_training(&a.train, &model, log, verbose)
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    corpus: String,
    checkpoint: String,
    predictions: &'a [hetgnn_pretrain::trainer::Prediction],
}

fn predict_cmd(a: &PredictArgs) -> Res<()> {
    let model = load_checkpoint(&a.checkpoint, LoadOptions::default()).map_err(data)?;
    let corpus = load(&a.corpus)?;
    let graphs: Vec<&HeteroGraph> = corpus.graphs.iter().collect();
    let preds = predict(&model, &graphs).map_err(data)?;
    let out = PredictionFile {
        corpus: a.corpus.display().to_string(),
        checkpoint: a.checkpoint.display().to_string(),
        predictions: &preds,
    };
    write_json(&out, a.out.as_deref())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Res<()> {
    let corpus = load(&a.corpus)?;
    let graphs: Vec<&HeteroGraph> = corpus.graphs.iter().collect();
    let truth = corpus
        .labels()
        .ok_or_else(|| Failure::Data(format!("{}: every graph needs a label", a.corpus.display())))?;
    match &a.checkpoint {
        Some(ckpt) => {
            let model = load_checkpoint(ckpt, LoadOptions::default()).map_err(data)?;
            let preds = predict(&model, &graphs).map_err(data)?;
            let pred: Vec<u8> = preds.iter().map(|p| p.label).collect();
            let metrics = confusion_and_metrics(&truth, &pred).map_err(data)?;
            write_json(
                &serde_json::json!({
                    "corpus": a.corpus.display().to_string(),
                    "checkpoint": ckpt.display().to_string(),
                    "metrics": metrics,
                }),
                a.out.as_deref(),
            )
        }
        None => {
            if a.epochs == 0 {
                return Err(Failure::Usage("--epochs must be at least 1".into()));
            }
            let cfg = TrainConfig {
                seed: a.seed,
                epochs: Some(a.epochs),
                train_count: a.train_count,
                ..TrainConfig::default()
            };
            let cv = cross_validate(&graphs, a.kfold, &cfg, None).map_err(data)?;
            write_json(
                &serde_json::json!({
                    "corpus": a.corpus.display().to_string(),
                    "k": a.kfold,
                    "config": cfg,
                    "cross_validation": cv,
                }),
                a.out.as_deref(),
            )
        }
    }
}

fn experiment_cmd(a: &ExperimentArgs, m: &ArgMatches, verbose: bool) -> Res<()> {
    let mut cfg: ExperimentConfig = layer_file(ExperimentConfig::default(), a.config.as_deref())?;
    let from_cli = |id: &str| explicit(m, id) || a.config.is_none();
    if from_cli("k") {
        cfg.k = a.k;
    }
    if from_cli("seed") {
        cfg.seed = a.seed;
    }
    if from_cli("batch_size") {
        cfg.batch_size = a.batch_size;
    }
    if from_cli("lr") {
        cfg.lr = a.lr;
    }
    if from_cli("hidden_dim") {
        cfg.encoder.hidden_dim = a.hidden_dim;
    }
    if from_cli("alpha") {
        cfg.alpha = a.alpha;
    }
    if from_cli("jobs") {
        cfg.jobs = a.jobs;
    }
    for (v, f) in [
        (a.node_epochs, &mut cfg.node_epochs),
        (a.graph_epochs, &mut cfg.graph_epochs),
        (a.finetune_epochs, &mut cfg.finetune_epochs),
    ] {
        if v.is_some() {
            *f = v;
        }
    }
    if a.low_resource.is_some() {
        cfg.low_resource = a.low_resource;
    }
    if a.no_full {
        cfg.full = false;
    }
    if a.no_pretraining {
        cfg.pretraining = false;
    }
    if cfg.node_epochs == Some(0) || cfg.graph_epochs == Some(0) {
        return Err(Failure::Usage("pre-training epochs must be at least 1".into()));
    }
    note(verbose, "experiment config", &cfg);
    let pre = load(&a.pretrain)?;
    let fine = load(&a.finetune)?;
    cfg.encoder.feature_dim = fine.feature_dim;
    let reports = run_experiment(&pre, &fine, &cfg).map_err(data)?;
    write_json(&serde_json::json!({ "reports": reports }), Some(&a.out))?;
    let table: String = reports.iter().map(render_table).collect::<Vec<_>>().join("\n");
    match &a.table {
        Some(p) => fs::write(p, &table).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}

fn run(cli: &Cli, m: &ArgMatches) -> Res<()> {
    let sub = m.subcommand().map(|(_, s)| s).expect("subcommand required");
    match &cli.command {
        Command::Corpusgen(a) => corpusgen(a, sub, cli.verbose),
        Command::Pretrain(a) => pretrain_cmd(a, sub, cli.verbose),
        Command::Finetune(a) => finetune_cmd(a, sub, cli.verbose),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment_cmd(a, sub, cli.verbose),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
