//! Command-line front end: dataset collection, value-head training,
//! evaluation runs, value traces and latent export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use vvlaps::chunks::{ChunkLibrary, LibraryConfig};
use vvlaps::collect::{build_dataset, CollectConfig, ValueDataset};
use vvlaps::envsim::{ChunkGrid, EnvConfig, Family, LayoutSet};
use vvlaps::eval::{export_latents_file, run_to_dir, value_trace, ExperimentConfig, TableFormat};
use vvlaps::prior::{PriorParams, SurrogatePrior};
use vvlaps::rng::stream;
use vvlaps::valuehead::{train, TrainConfig, ValueHead};
use vvlaps::{Error, Result};

#[derive(Parser)]
#[command(name = "vvlaps", version, about = "Value-guided tree search over action chunks")]
struct Cli {
    /// Worker threads for episode-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the prior and write a balanced value dataset.
    Collect(CollectArgs),
    /// Train a value head on a dataset.
    Train(TrainArgs),
    /// Compare methods on a grid of layouts and write a run directory.
    Eval(EvalArgs),
    /// Record predicted values along one prior episode.
    Trace(TraceArgs),
    /// Write dataset readouts and targets for external projection.
    ExportLatents(ExportArgs),
    /// Print the shipped layout set as JSON.
    Layouts,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes_per_init: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated task ids.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<u32>>,
    #[arg(long)]
    no_balance: bool,
}

/// `train` config file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainJob {
    dataset: Option<PathBuf>,
    output: Option<PathBuf>,
    loss_curve: Option<PathBuf>,
    /// Train only on tasks of this family.
    family: Option<Family>,
    train: TrainConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Model JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Run directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<u32>>,
    #[arg(long)]
    epsilon: Option<f64>,
}

/// `trace` config file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TraceJob {
    task: u32,
    init: usize,
    seed: u64,
    model: Option<PathBuf>,
    output: Option<PathBuf>,
    prior: PriorParams,
    library: LibraryConfig,
    env: EnvConfig,
}


#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    task: Option<u32>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Trace CSV to write; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `export-latents` config file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExportJob {
    dataset: Option<PathBuf>,
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    Family::ALL
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| format!("unknown family {s:?}"))
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))
        }
    }
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::config(format!("missing {what}")))
}

/// An input file that must exist; absence is a configuration error.
fn required_input(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = required(path, what)?;
    if !path.is_file() {
        return Err(Error::config(format!("{what}: {} does not exist", path.display())));
    }
    Ok(path)
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn make_prior(params: &PriorParams, library: LibraryConfig) -> Result<SurrogatePrior> {
    params.validate()?;
    SurrogatePrior::new(*params, Arc::new(ChunkLibrary::build(library)?))
}

fn collect(args: CollectArgs) -> Result<()> {
    let mut config: CollectConfig = load_json(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.episodes_per_init {
        config.episodes_per_init = n;
    }
    if let Some(e) = args.epsilon {
        config.prior.epsilon = e;
    }
    if let Some(g) = args.gamma {
        config.gamma = g;
    }
    if let Some(t) = args.tasks {
        config.tasks = t;
    }
    if args.no_balance {
        config.balance = false;
    }
    config.validate()?;
    let env = ChunkGrid::new(LayoutSet::shipped(), config.env)?;
    config.layouts(&env)?;
    let prior = make_prior(&config.prior, config.library)?;
    let collection = build_dataset(&env, &prior, &config)?;
    collection.dataset.save(&args.out)?;
    print_json(&collection.summary);
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut job: TrainJob = load_json(args.config.as_deref())?;
    job.dataset = args.dataset.or(job.dataset);
    job.output = args.out.or(job.output);
    job.loss_curve = args.loss_curve.or(job.loss_curve);
    job.family = args.family.or(job.family);
    if let Some(s) = args.seed {
        job.train.seed = s;
    }
    if let Some(e) = args.epochs {
        job.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        job.train.learning_rate = lr;
    }
    job.train.validate()?;
    let dataset_path = required_input(job.dataset, "dataset path (--dataset)")?;
    let output = required(job.output, "model output path (--out)")?;
    let mut dataset = ValueDataset::load(&dataset_path)?;
    if let Some(family) = job.family {
        let env = ChunkGrid::shipped();
        let ids: Vec<u32> = env
            .task_ids()
            .into_iter()
            .filter(|&t| env.task(t).map(|s| s.family == family).unwrap_or(false))
            .collect();
        dataset = dataset.restrict(&ids);
    }
    let report = train(&dataset.examples, &job.train)?;
    report.params.save(&output)?;
    if let Some(curve) = &job.loss_curve {
        std::fs::write(curve, report.loss_curve_csv()).map_err(|e| Error::io(curve, e))?;
    }
    print_json(&serde_json::json!({
        "model": output,
        "train_size": report.train_size,
        "test_size": report.test_size,
        "initial_train_mse": report.initial_train_loss,
        "final_train_mse": report.final_train_loss(),
        "test_mse": report.test_mse,
        "test_ranking": report.test_ranking,
    }));
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let mut config: ExperimentConfig = load_json(args.config.as_deref())?;
    config.seed = args.seed;
    if let Some(out) = args.out {
        config.output = Some(out);
    }
    if let Some(r) = args.rollouts {
        config.rollouts = r;
    }
    if let Some(t) = args.tasks {
        config.tasks = t;
    }
    if let Some(e) = args.epsilon {
        config.prior.epsilon = e;
    }
    let dir = required(config.output.clone(), "output directory (--out)")?;
    let run = run_to_dir(&config, &dir)?;
    print!("{}", vvlaps::eval::render_table(&run.table, TableFormat::Markdown));
    Ok(())
}

fn trace_cmd(args: TraceArgs) -> Result<()> {
    let mut job: TraceJob = load_json(args.config.as_deref())?;
    job.model = args.model.or(job.model);
    job.output = args.out.or(job.output);
    if let Some(t) = args.task {
        job.task = t;
    }
    if let Some(i) = args.init {
        job.init = i;
    }
    if let Some(s) = args.seed {
        job.seed = s;
    }
    if let Some(e) = args.epsilon {
        job.prior.epsilon = e;
    }
    let model = required_input(job.model, "model path (--model)")?;
    let env = ChunkGrid::new(LayoutSet::shipped(), job.env)?;
    env.num_inits(job.task)?;
    let prior = make_prior(&job.prior, job.library)?;
    let head = ValueHead::load(&model)?;
    let mut rng = stream(job.seed, &[]);
    let trace = value_trace(&env, job.task, job.init, &head, &prior, &mut rng)?;
    match &job.output {
        Some(p) => std::fs::write(p, trace.to_csv()).map_err(|e| Error::io(p, e))?,
        None => print!("{}", trace.to_csv()),
    }
    log::info!("task {} init {}: success {}", job.task, job.init, trace.success);
    Ok(())
}

fn export_cmd(args: ExportArgs) -> Result<()> {
    let mut job: ExportJob = load_json(args.config.as_deref())?;
    job.dataset = args.dataset.or(job.dataset);
    job.output = args.out.or(job.output);
    let dataset = required_input(job.dataset, "dataset path (--dataset)")?;
    let output = required(job.output, "output path (--out)")?;
    let rows = export_latents_file(&dataset, &output)?;
    print_json(&serde_json::json!({ "rows": rows, "output": output }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Trace(a) => trace_cmd(a),
        Command::ExportLatents(a) => export_cmd(a),
        Command::Layouts => {
            print!("{}", LayoutSet::shipped().to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
