//! `forestiv` command-line tool.
//!
//! Exit codes: 0 success, 1 computation failure, 2 input or config error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] forestiv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_input_error() => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "forestiv", version, about = "Random-forest instrumental variables for ML-generated covariates")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration (overrides the preset).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Bundled configuration to start from: bike, bank, boston, cancer, blindspot.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed (overrides `master_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Omit the `generated_at` field so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timestamp: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Grow a forest on the training rows of a CSV and save it as JSON.
    FitForest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the input CSV with its train/test/unlabel tags.
        #[arg(long)]
        partitioned_out: Option<PathBuf>,
    },
    /// Estimate the econometric model with a fitted forest.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        #[arg(long, value_enum, default_value = "forestiv")]
        mode: Mode,
        /// Hotelling test level (overrides `forest_iv.alpha`).
        #[arg(long)]
        alpha: Option<f64>,
        /// Add instrument strength/exclusion diagnostics.
        #[arg(long)]
        diagnose: bool,
        /// JSON output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-candidate CSV (forestiv, subset and averaging modes).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the synthetic experiment (or sweep) and write reports.
    Simulate {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value = "forestiv-out")]
        out_dir: PathBuf,
        /// Write the first round's synthetic data as CSV and stop.
        #[arg(long)]
        data_out: Option<PathBuf>,
    },
    /// Compare ForestIV with SIMEX / MC-SIMEX on the configured design.
    Benchmark {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value = "forestiv-out")]
        out_dir: PathBuf,
    },
    /// Instrument diagnostics for every tree of a fitted forest.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Biased,
    Unbiased,
    Forestiv,
    SampleSplit,
    Subset,
    Averaging,
    Simex,
    McSimex,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = config::load(cli.preset.as_deref(), cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    let ctx = commands::Context {
        cfg,
        timestamp: !cli.no_timestamp,
    };
    match cli.command {
        Command::FitForest {
            data,
            out,
            partitioned_out,
        } => commands::fit_forest(&ctx, &data, &out, partitioned_out.as_deref()),
        Command::Estimate {
            data,
            forest,
            mode,
            alpha,
            diagnose,
            out,
            csv,
        } => commands::estimate(
            &ctx,
            &commands::EstimateArgs {
                data,
                forest,
                mode,
                alpha,
                diagnose,
                out,
                csv,
            },
        ),
        Command::Simulate {
            rounds,
            out_dir,
            data_out,
        } => commands::simulate(ctx, rounds, &out_dir, data_out.as_deref()),
        Command::Benchmark { rounds, out_dir } => commands::benchmark(ctx, rounds, &out_dir),
        Command::Diagnose { data, forest, out } => commands::diagnose(&ctx, &data, &forest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
