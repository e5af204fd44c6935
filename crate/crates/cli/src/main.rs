mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgAction, Args, Parser, Subcommand};

use commands::FitInputs;
use config::{FilterFlags, HyperFlags, Settings};

/// Multi-rubric spatial model for ordinal ratings.
#[derive(Parser, Debug)]
#[command(name = "multirubric", version, about, propagate_version = true)]
struct Cli {
    /// Output directory [default: ./multirubric-out]
    #[arg(long, global = true, env = "MULTIRUBRIC_OUT")]
    out: Option<PathBuf>,
    /// Configuration file of `key = value` lines; flags of the same name win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads [default: one per core]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More logging (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest ratings, run the sampler and store the posterior draws
    Fit(FitArgs),
    /// Score ratings under a stored fit
    Predict(PredictArgs),
    /// Item quality, rubric clusters and the spatial field of a stored fit
    Summarize(SummarizeArgs),
    /// Write a synthetic dataset in the ingestion format
    Simulate(SimulateArgs),
    /// Multi- versus single-rubric fits across rubric similarity τ
    TauStudy(TauStudyArgs),
    /// Held-out fit across latent-factor dimensions
    FactorStudy(FactorStudyArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Ratings CSV: user_id, item_id, stars, date
    #[arg(long)]
    ratings: Option<PathBuf>,
    /// Items CSV: item_id, longitude, latitude, covariates…
    #[arg(long)]
    items: Option<PathBuf>,
    /// Share of ratings held out and scored after the fit
    #[arg(long)]
    holdout: Option<String>,
    /// Seed of the held-out split
    #[arg(long)]
    split_seed: Option<String>,
    #[command(flatten)]
    hyper: HyperFlags,
    #[command(flatten)]
    filter: FilterFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Directory written by `fit`
    #[arg(long)]
    fit: PathBuf,
    /// Ratings to score; defaults to the fit's held-out split
    #[arg(long)]
    ratings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    /// Directory written by `fit`
    #[arg(long)]
    fit: PathBuf,
}

#[derive(Args, Debug, Default)]
struct SimArgs {
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    users: Option<String>,
    /// Number of observed ratings
    #[arg(long)]
    ratings: Option<String>,
    /// Latent-utility draws used to place the break-points
    #[arg(long)]
    pool_size: Option<String>,
}

impl SimArgs {
    fn pairs(&self) -> [(&'static str, Option<String>); 4] {
        [
            ("items", self.items.clone()),
            ("users", self.users.clone()),
            ("ratings", self.ratings.clone()),
            ("pool-size", self.pool_size.clone()),
        ]
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// `tau` (two rubrics, no factors) or `supplement` (three rubrics, L = 4)
    #[arg(long)]
    preset: Option<String>,
    /// Rubric similarity for the `tau` preset
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[command(flatten)]
    sim: SimArgs,
}

#[derive(Args, Debug)]
struct TauStudyArgs {
    /// Comma-separated τ values [default: 0,0.1,…,1]
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated data seeds [default: 1]
    #[arg(long)]
    seeds: Option<String>,
    /// Share of ratings used for training
    #[arg(long)]
    train_fraction: Option<String>,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    hyper: HyperFlags,
}

#[derive(Args, Debug)]
struct FactorStudyArgs {
    /// Comma-separated factor dimensions [default: 1,…,7]
    #[arg(long)]
    factor_grid: Option<String>,
    /// Comma-separated data seeds [default: 1,…,5]
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    train_fraction: Option<String>,
    /// Items whose ζ draws are reported individually
    #[arg(long)]
    zeta_items: Option<String>,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    hyper: HyperFlags,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = cli.out.unwrap_or_else(|| PathBuf::from("multirubric-out"));
    let mut settings = Settings::load(cli.config.as_deref())?;
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match cli.command {
        Command::Fit(a) => {
            settings.overlay([
                ("ratings", path_str(&a.ratings)),
                ("items", path_str(&a.items)),
                ("holdout", a.holdout),
                ("split-seed", a.split_seed),
            ]);
            settings.overlay_hyper(&a.hyper);
            settings.overlay_filter(&a.filter);
            commands::fit(FitInputs { settings, config_file: cli.config }, &out)
        }
        Command::Predict(a) => commands::predict(&a.fit, a.ratings.as_deref(), &out),
        Command::Summarize(a) => commands::summarize(&a.fit, &out),
        Command::Simulate(a) => {
            settings.overlay([("preset", a.preset), ("tau", a.tau), ("seed", a.seed)]);
            settings.overlay(a.sim.pairs());
            commands::simulate(settings, cli.config, &out)
        }
        Command::TauStudy(a) => {
            settings.overlay([("grid", a.grid), ("seeds", a.seeds), ("train-fraction", a.train_fraction)]);
            settings.overlay(a.sim.pairs());
            settings.overlay_hyper(&a.hyper);
            commands::tau_study(settings, cli.config, &out)
        }
        Command::FactorStudy(a) => {
            settings.overlay([
                ("factor-grid", a.factor_grid),
                ("seeds", a.seeds),
                ("train-fraction", a.train_fraction),
                ("zeta-items", a.zeta_items),
            ]);
            settings.overlay(a.sim.pairs());
            settings.overlay_hyper(&a.hyper);
            commands::factor_study(settings, cli.config, &out)
        }
    }
}

/// 3 for numerical failures inside the model, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical =
        err.chain().filter_map(|e| e.downcast_ref::<multirubric::Error>()).any(multirubric::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
