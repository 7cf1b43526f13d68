//! `count-adapt`: generate data, prime, adapt, refine, classify, evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "count-adapt",
    version,
    about = "Multi-domain patch-based object counting with residual adapters"
)]
pub struct Cli {
    /// TOML config with one `[subcommand]` section of flat keys each.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a key of the active section, e.g. `--set iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Directory for the echoed config, logs and reports
    /// [default: runs/<subcommand>-<unix time>].
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dot-annotated dataset for one preset or spec file.
    GenData(GenDataArgs),
    /// Train the shared head and the first domain's adapters, then freeze.
    Prime(PrimeArgs),
    /// Add a domain by training fresh adapters against the frozen head.
    Adapt(AdaptArgs),
    /// Train a domain's estimate-grid refiner.
    TrainRefiner(DomainArgs),
    /// Train the domain classifier on labelled scenes of two or more domains.
    TrainClassifier(ClassifierArgs),
    /// Per-scene MAE/RMSE report for one or all domains of a dataset.
    ///
    /// report.csv columns: domain,split,refined,scene_id,gt,pred,abs_err.
    Eval(EvalArgs),
    /// Print the per-patch estimate grid and total count of one image.
    Predict(PredictArgs),
    /// Print parameter counts of an archive.
    Audit(AuditArgs),
    /// Finite-difference check of every analytic gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Preset name (crowd-like, vehicle-like, wildlife-like, cell-like) or a
    /// TOML domain spec file.
    pub spec: String,
    pub count: usize,
    pub out_dir: PathBuf,
    /// Overrides the `seed` key.
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PrimeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the dataset's only domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// Archive directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: DomainArgs,
    /// Reset and retrain a domain that is already registered.
    #[arg(long)]
    pub retrain: bool,
}

#[derive(Debug, Args)]
pub struct DomainArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the dataset's only domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// Write the updated archive here instead of in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Dataset directories; every domain found becomes a class.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to every domain in the dataset.
    #[arg(long)]
    pub domain: Option<String>,
    /// Sum the refined grid instead of the raw estimates.
    #[arg(long)]
    pub refined: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub archive: PathBuf,
    pub image: PathBuf,
    #[arg(
        long,
        conflicts_with = "auto_domain",
        required_unless_present = "auto_domain"
    )]
    pub domain: Option<String>,
    /// Pick the domain with the archive's classifier first.
    #[arg(long)]
    pub auto_domain: bool,
    #[arg(long)]
    pub refined: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub archive: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(default_value_t = 0)]
    pub seed: u64,
}

/// Cap rayon's pool with `COUNT_ADAPT_THREADS`.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("COUNT_ADAPT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("COUNT_ADAPT_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!(
                "{}",
                text.lines().next().unwrap_or("error: invalid arguments")
            );
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|_| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", config::one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
