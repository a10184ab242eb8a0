//! `fuse`: merge ranked lists from several retrieval channels, tune the
//! channel weights and inspect channel diversity.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 on runtime failure.

mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chanfuse::synth::{SyntheticSpec, PRESETS};
use chanfuse::{FuseError, Metric};
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{AnalyzeOptions, WeightSource};
use config::{read_json, Optimizer, Overrides, RunConfig};

/// Bad user input; maps to exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "fuse", version, about = "Multi-channel retrieval fusion with tuned channel weights")]
struct Cli {
    /// Worker threads [default: $FUSE_THREADS, else one per core]
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge with a given weights file and report precision, recall and F1
    Eval(EvalArgs),
    /// Optimize the channel weights
    Optimize(OptimizeArgs),
    /// Channel overlap (Jaccard), user-ranking agreement (RBO) and coverage
    Analyze(AnalyzeArgs),
    /// Generate a synthetic dataset
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory containing manifest.json
    #[arg(long)]
    data: Option<PathBuf>,
    /// Merge budget L
    #[arg(short, long)]
    l: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, threads: Option<usize>) -> Overrides {
        Overrides {
            data: self.data.clone(),
            l: self.l,
            metric: self.metric,
            seed: self.seed,
            out: self.out.clone(),
            threads,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Global weights JSON
    #[arg(long, required_unless_present = "personalized", conflicts_with = "personalized")]
    weights: Option<PathBuf>,
    /// Per-user weights JSONL
    #[arg(long)]
    personalized: Option<PathBuf>,
    /// Include per-user scores in the report
    #[arg(long)]
    per_user: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Which {
    Cem,
    Bayes,
    Pg,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    which: Which,
    #[command(flatten)]
    common: Common,
    /// User split fractions, e.g. 0.6,0.2,0.2 for train, select and eval
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    /// Continue CEM from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// CEM checkpoint to start Bayesian refinement from
    #[arg(long)]
    start: Option<PathBuf>,
    /// Global weights file anchoring the policy
    #[arg(long)]
    global: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Weights used for the fused coverage [default: equal]
    #[arg(long)]
    weights: Option<PathBuf>,
    /// RBO persistence p
    #[arg(long)]
    persistence: Option<f64>,
    /// RBO depth over the user rankings [default: number of users]
    #[arg(long)]
    depth: Option<usize>,
    /// Also write both matrices as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Spec JSON file
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Named preset
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Overrides the spec seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve(common: &Common, threads: Option<usize>, extra: Overrides, opt: Option<Optimizer>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(&common.overrides(threads));
    cfg.apply(&extra);
    cfg.resolve_for(opt)?;
    Ok(cfg)
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(0) => Err(Invalid("thread count must be positive".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
        None => f(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval(a) => {
            let cfg = resolve(&a.common, cli.threads, Overrides::default(), None)?;
            let source = match (a.weights, a.personalized) {
                (Some(w), _) => WeightSource::Global(w),
                (None, Some(p)) => WeightSource::Personalized(p),
                (None, None) => unreachable!("clap requires one"),
            };
            in_pool(cfg.thread_count()?, || commands::eval(&cfg, &source, a.per_user))
        }
        Command::Optimize(a) => {
            let opt = match a.which {
                Which::Cem => Optimizer::Cem,
                Which::Bayes => Optimizer::Bayes,
                Which::Pg => Optimizer::Pg,
            };
            let extra = Overrides {
                split: a.split,
                start: a.start,
                global: a.global,
                ..Default::default()
            };
            if a.resume.is_some() && opt != Optimizer::Cem {
                return Err(Invalid("--resume only applies to `optimize cem`".into()).into());
            }
            let cfg = resolve(&a.common, cli.threads, extra, Some(opt))?;
            in_pool(cfg.thread_count()?, || commands::optimize(&cfg, opt, a.resume.as_deref()))
        }
        Command::Analyze(a) => {
            let cfg = resolve(&a.common, cli.threads, Overrides::default(), None)?;
            let opts = AnalyzeOptions {
                weights: a.weights,
                persistence: a.persistence,
                depth: a.depth,
                csv: a.csv,
            };
            in_pool(cfg.thread_count()?, || commands::analyze(&cfg, &opts))
        }
        Command::Synth(a) => {
            let mut spec: SyntheticSpec = match (&a.spec, &a.preset) {
                (Some(path), _) => read_json(path)?,
                (None, Some(name)) => SyntheticSpec::preset(name, 0)?,
                (None, None) => unreachable!("clap requires one"),
            };
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let threads = RunConfig {
                threads: cli.threads,
                ..Default::default()
            }
            .thread_count()?;
            in_pool(threads, || commands::synth(spec, &a.out))
        }
    }
}

fn is_invalid(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || e.is::<serde_json::Error>()
            || e.downcast_ref::<FuseError>().is_some_and(FuseError::is_validation)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_invalid(&e) { 1 } else { 2 })
        }
    }
}
