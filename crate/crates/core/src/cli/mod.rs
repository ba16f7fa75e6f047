//! The `sar` command line.

pub mod compare;
pub mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use crate::envs::StylePool;
use crate::harness::{self, embedding_style_gap, evaluate, load_latest, write_eval, HarnessError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_METRIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("unknown metric {metric:?}; available columns: {}", available.join(", "))]
    BadMetric { metric: String, available: Vec<String> },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::BadMetric { .. } => EXIT_METRIC,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => CliError::Config(e.to_string()),
            HarnessError::MissingArtifact(p) => CliError::Missing(p.display().to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sar", version, about = "Train and evaluate style-agnostic agents on styled toy environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and print its directory.
    Train(TrainArgs),
    /// Evaluate a run's latest checkpoint on a style pool and update eval.json.
    Eval(EvalArgs),
    /// Aggregate eval.json over seeds and rank variants.
    Compare(CompareArgs),
    /// Plot a metrics.csv column with EMA smoothing.
    Plot(PlotArgs),
    /// Embedding style-sensitivity of a run's latest checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ppo or sac.
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub env: Option<String>,
    /// Label used by compare.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub timesteps: Option<u64>,
    /// Actor style-divergence coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Generator coefficient; defaults to lambda.
    #[arg(long)]
    pub lambda_gen: Option<f64>,
    /// Critic consistency coefficient.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Enable or disable in-batch style mixing.
    #[arg(long)]
    pub mix: Option<bool>,
    /// Timesteps before the adversarial terms switch on.
    #[arg(long)]
    pub warmup: Option<u64>,
    /// none, trans, or color.
    #[arg(long)]
    pub augmentation: Option<String>,
    #[arg(long)]
    pub n_train_styles: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Run directory. Defaults to $SAR_RUNS_DIR/<variant>-<env>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, env = "SAR_RUNS_DIR", default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub pool: PoolArg,
    /// Defaults to the run's eval_episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Defaults to the run's eval_seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PoolArg {
    Train,
    Test,
}

impl From<PoolArg> for StylePool {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Train => StylePool::Train,
            PoolArg::Test => StylePool::Test,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct PlotArgs {
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    #[arg(long, default_value = "episode_return")]
    pub metric: String,
    /// EMA coefficient; 0 plots the raw series.
    #[arg(long, default_value_t = 0.98)]
    pub smooth: f64,
    /// SVG path; the smoothed CSV is written alongside.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct AnalyzeArgs {
    pub run_dir: PathBuf,
    /// Held-out states: layouts drawn from seeds past the training pool.
    #[arg(long, default_value_t = 8)]
    pub states: u64,
    /// Test-pool styles per state.
    #[arg(long, default_value_t = 8)]
    pub styles: u64,
}

fn set(obj: &mut Map<String, Value>, key: &str, v: Option<impl Into<Value>>) {
    if let Some(v) = v {
        obj.insert(key.to_string(), v.into());
    }
}

/// The config file merged with flag overrides, as persisted under `input`.
pub fn train_input(args: &TrainArgs) -> Result<Value, CliError> {
    let mut obj = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::Config(format!("{}: config must be a JSON object", path.display()))),
                Err(e) => return Err(CliError::Config(format!("{}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    set(&mut obj, "algorithm", args.algo.clone());
    set(&mut obj, "env", args.env.clone());
    set(&mut obj, "variant", args.variant.clone());
    set(&mut obj, "seed", args.seed);
    set(&mut obj, "total_timesteps", args.timesteps);
    set(&mut obj, "lambda", args.lambda);
    set(&mut obj, "lambda_gen", args.lambda_gen);
    set(&mut obj, "kappa", args.kappa);
    set(&mut obj, "mix", args.mix);
    set(&mut obj, "warmup_timesteps", args.warmup);
    set(&mut obj, "augmentation", args.augmentation.clone());
    set(&mut obj, "n_train_styles", args.n_train_styles);
    set(&mut obj, "eval_every", args.eval_every);
    set(&mut obj, "eval_episodes", args.eval_episodes);
    set(&mut obj, "checkpoint_every", args.checkpoint_every);
    Ok(Value::Object(obj))
}

pub fn resolve(input: &Value) -> Result<RunConfig, CliError> {
    RunConfig::from_value(input).map_err(|errs| {
        CliError::Config(
            errs.iter()
                .map(|e| format!("invalid config field {}", e))
                .collect::<Vec<_>>()
                .join("\n"),
        )
    })
}

pub fn default_run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-{}-seed{}", cfg.variant, cfg.env, cfg.seed))
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let input = train_input(args)?;
    let cfg = resolve(&input)?;
    let dir = args.out.clone().unwrap_or_else(|| default_run_dir(&args.runs_dir, &cfg));
    harness::train(&cfg, &input, &dir)?;
    Ok(dir)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<harness::EvalSummary, CliError> {
    let (cfg, model, step) = load_latest(&args.run_dir)?;
    let summary = evaluate(
        &model,
        &cfg,
        args.pool.into(),
        args.episodes.unwrap_or(cfg.eval_episodes),
        args.seed.unwrap_or(cfg.eval_seed),
    )?;
    write_eval(&args.run_dir, &cfg, step, std::slice::from_ref(&summary))?;
    Ok(summary)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<harness::StyleGap, CliError> {
    let (cfg, model, _) = load_latest(&args.run_dir)?;
    let layouts: Vec<u64> = (0..args.states).map(|i| cfg.n_layouts + i).collect();
    let styles: Vec<u64> = StylePool::Test.ids().take(args.styles as usize).collect();
    Ok(embedding_style_gap(&model, &cfg.env, &layouts, &styles)?)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Runs a parsed command, printing its output; returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<(), CliError> = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|dir| println!("{}", dir.display())),
        Command::Eval(a) => cmd_eval(&a).map(|s| {
            println!(
                "{} pool: {:.4} ± {:.4} over {} episodes (seed {})",
                s.pool.name(),
                s.mean,
                s.std,
                s.episodes,
                s.seed
            )
        }),
        Command::Compare(a) => compare::compare(&a.run_dirs).and_then(|r| {
            print!("{}", r.table());
            match &a.json {
                Some(p) => compare::write_json(&r, p),
                None => {
                    println!("{}", to_json(&r));
                    Ok(())
                }
            }
        }),
        Command::Plot(a) => {
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.svg", a.metric)));
            plot::plot(&a.run_dirs, &a.metric, a.smooth, &out).map(|csv| {
                println!("{}", out.display());
                println!("{}", csv.display());
            })
        }
        Command::Analyze(a) => cmd_analyze(&a).map(|g| println!("{}", to_json(&g))),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `std::env::args` and runs; usage errors exit 2.
pub fn main() -> i32 {
    match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
