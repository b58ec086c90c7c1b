//! The `btm` command line: data generation, full experiment runs,
//! evaluation, interpolation sweeps and ablation grids.

pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use btm_core::dataman::{
    imbalance_ratio, read_dataset, write_dataset, LabeledDataset, LongTailMode, SyntheticSpec,
};
use btm_core::merge::lambda_sweep;
use btm_core::metrics::evaluate;
use btm_core::nncore::Checkpoint;
use btm_core::pipeline::{run_ablation, run_experiment, Ablation, ExperimentRecord};
use btm_core::BtmError;
use clap::{Args, Parser, Subcommand};

pub use config::{DataSource, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "btm",
    version,
    about = "Balanced training and merging for long-tailed classification"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Global seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel fine-tunes and sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write long-tailed train and balanced test dataset files.
    GenData(GenDataArgs),
    /// Run pretrain, BTM and post-train plus the baseline arm.
    Run,
    /// Evaluate a checkpoint and print its metrics report.
    Eval(EvalArgs),
    /// Evaluate the linear path between two checkpoints.
    Sweep(SweepArgs),
    /// Run one ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub max_count: Option<usize>,
    /// Head-to-tail count ratio.
    #[arg(long)]
    pub imbalance: Option<f64>,
    /// Use this power-law exponent directly instead of `--imbalance`.
    #[arg(long)]
    pub pareto_alpha: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test dataset file; defaults to the configured data source.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Checkpoint weighted by lambda.
    #[arg(long)]
    pub a: PathBuf,
    /// Checkpoint weighted by 1 - lambda.
    #[arg(long)]
    pub b: PathBuf,
    /// Number of evenly spaced lambdas in [0, 1].
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// merge-strategies, subset-size or when-how.
    pub name: String,
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs; nothing was computed. Exit 2.
    Usage(anyhow::Error),
    /// Failure while running. Exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<BtmError> for CliError {
    fn from(e: BtmError) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

/// Config merged with command-line overrides.
#[derive(Debug)]
pub struct Settings {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub config: RunConfig,
}

impl Settings {
    pub fn resolve(common: &CommonArgs) -> Result<Self, CliError> {
        let config = match &common.config {
            Some(path) => RunConfig::load(path).map_err(usage)?,
            None => RunConfig::default(),
        };
        let jobs = common.jobs.or(config.jobs);
        if jobs == Some(0) {
            return Err(usage(anyhow!("--jobs must be at least 1")));
        }
        Ok(Self {
            seed: common.seed.unwrap_or(config.seed),
            out: common.out.clone().or_else(|| config.out.clone()),
            jobs,
            config,
        })
    }

    fn out_or(&self, default: impl Into<PathBuf>) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default.into())
    }
}

pub fn execute(cli: &Cli, settings: &Settings) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(args) => gen_data(args, settings),
        Command::Run => run(settings),
        Command::Eval(args) => eval(args, settings),
        Command::Sweep(args) => sweep(args, settings),
        Command::Ablate(args) => ablate(args, settings),
    }
}

fn gen_data(args: &GenDataArgs, settings: &Settings) -> Result<(), CliError> {
    let mut spec = match &settings.config.data {
        DataSource::Synthetic(spec) => spec.clone(),
        _ => SyntheticSpec::desk_default(settings.seed),
    };
    spec.seed = settings.seed;
    if let Some(v) = args.classes {
        spec.classes = v;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.max_count {
        spec.max_count = v;
    }
    if let Some(v) = args.imbalance {
        spec.imbalance_ratio = v;
        spec.mode = LongTailMode::ImbalanceRatio;
    }
    if let Some(v) = args.pareto_alpha {
        spec.pareto_alpha = v;
        spec.mode = LongTailMode::ParetoAlpha;
    }
    if let Some(v) = args.separation {
        spec.separation = v;
    }
    if let Some(v) = args.test_per_class {
        spec.test_per_class = v;
    }
    config::validate_synthetic(&spec).map_err(usage)?;

    let (train, test) = spec.build()?;
    let out = settings.out_or("data");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (train_path, test_path) = (out.join("train.btmd"), out.join("test.btmd"));
    write_dataset(&train, &train_path)?;
    write_dataset(&test, &test_path)?;

    let counts: Vec<String> = train.class_counts().iter().map(|c| c.to_string()).collect();
    println!("train samples: {}", train.len());
    println!("test samples: {}", test.len());
    println!("class counts: {}", counts.join(" "));
    println!("imbalance ratio: {:.2}", imbalance_ratio(&train));
    println!("wrote {} and {}", train_path.display(), test_path.display());
    Ok(())
}

fn run(settings: &Settings) -> Result<(), CliError> {
    let plan = settings.config.plan.clone().reseeded(settings.seed);
    let (train, test) = settings.config.data.load(settings.seed).map_err(usage)?;
    log::info!("train {} samples, test {} samples", train.len(), test.len());
    let result = run_experiment(&plan, &train, &test)?;
    let out = settings.out_or(format!("runs/seed-{}", settings.seed));
    ExperimentRecord::write_dir(&out, &plan, &result)?;

    println!(
        "{:<22} {:>8} {:>8} {:>8} {:>8}",
        "stage", "H-mean", "G-mean", "acc", "L-recall"
    );
    for stage in result.record.stages() {
        let r = &stage.report;
        println!(
            "{:<22} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            stage.name,
            100.0 * r.h_mean,
            100.0 * r.g_mean,
            100.0 * r.accuracy,
            100.0 * r.lowest_recall
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn test_set(data: Option<&Path>, settings: &Settings) -> Result<LabeledDataset, CliError> {
    match data {
        Some(path) => {
            Ok(read_dataset(path).with_context(|| format!("reading {}", path.display()))?)
        }
        None => Ok(settings.config.data.load_test(settings.seed)?),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?)
}

fn check_compatible(ckpt: &Checkpoint, test: &LabeledDataset) -> Result<(), CliError> {
    let arch = ckpt.arch();
    if arch.d_in() != test.dim() || arch.n_classes() != test.n_classes() {
        return Err(usage(anyhow!(
            "checkpoint expects {} features and {} classes, test set has {} and {}",
            arch.d_in(),
            arch.n_classes(),
            test.dim(),
            test.n_classes()
        )));
    }
    Ok(())
}

fn eval(args: &EvalArgs, settings: &Settings) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let test = test_set(args.data.as_deref(), settings)?;
    check_compatible(&ckpt, &test)?;
    let report = evaluate(&ckpt, &test)?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    if let Some(out) = &settings.out {
        fs::write(out, format!("{json}\n"))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn sweep(args: &SweepArgs, settings: &Settings) -> Result<(), CliError> {
    if args.grid < 2 {
        return Err(usage(anyhow!("--grid needs at least 2 points")));
    }
    let a = load_checkpoint(&args.a)?;
    let b = load_checkpoint(&args.b)?;
    if a.arch() != b.arch() {
        return Err(usage(BtmError::ArchitectureMismatch {
            left: a.arch().layer_dims.clone(),
            right: b.arch().layer_dims.clone(),
        }));
    }
    let test = test_set(args.data.as_deref(), settings)?;
    check_compatible(&a, &test)?;
    let curve = lambda_sweep(a.params(), b.params(), args.grid, &test)?;
    let csv = curve.to_csv();
    match &settings.out {
        Some(out) => {
            fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate(args: &AblateArgs, settings: &Settings) -> Result<(), CliError> {
    let ablation: Ablation = args.name.parse().map_err(usage)?;
    let plan = settings.config.plan.clone().reseeded(settings.seed);
    let (train, test) = settings.config.data.load(settings.seed).map_err(usage)?;
    let table = run_ablation(ablation, &plan, &train, &test)?;
    for check in table.soup_checks().filter(|c| !c.holds()) {
        log::error!(
            "greedy soup scored {} below its best ingredient {}",
            check.soup_score,
            check.best_single_score
        );
    }
    let out = settings.out_or(format!(
        "runs/ablate-{}-seed-{}",
        ablation.name(),
        settings.seed
    ));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let text = table.to_text_table();
    fs::write(out.join(format!("{}.csv", ablation.name())), table.to_csv())
        .with_context(|| format!("writing into {}", out.display()))?;
    fs::write(out.join(format!("{}.txt", ablation.name())), &text)
        .with_context(|| format!("writing into {}", out.display()))?;
    print!("{text}");
    Ok(())
}
