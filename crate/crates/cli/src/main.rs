//! `tail`: command-line driver for the continual imitation-learning
//! experiments. Ties data generation, pretraining, continual adaptation,
//! evaluation, and reporting into reproducible runs: every command is a
//! pure function of its config and seeds, so reruns yield byte-identical
//! artifacts.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical abort.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "tail", version, about = "Continual imitation learning with task-specific adapters")]
struct Cli {
    /// Evaluation fan-out threads (default: all physical cores).
    /// TAIL_DETERMINISTIC=1 forces a single worker.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate every suite's demonstrations and a dataset manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Root seed overriding the config's seed block.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the base policy on the pretrain suite.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from an existing checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the full adaptation curriculum under one strategy.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the pretrain outputs (base checkpoint + ledger).
        #[arg(long)]
        base: PathBuf,
        /// One of: lora, bottleneck, prefix, roboadapter, fft, fpf, er, ewc.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint (optionally with a bundle) on one suite.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding a base checkpoint, or a checkpoint prefix.
        #[arg(long)]
        base: PathBuf,
        /// Bundle file prefix (the `.json`/`.bin` pair without extension).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Curriculum stage to evaluate: 0 = pretrain suite.
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate FWT/BWT across seed ledgers (or re-read a metrics CSV).
    Metrics {
        /// Ledger directories, or a single aggregate CSV to round-trip.
        inputs: Vec<PathBuf>,
        /// Write the aggregate CSV here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report parameter counts and trainable fractions of a checkpoint or
    /// bundle.
    Inspect {
        /// Checkpoint or bundle prefix (the `.json`/`.bin` pair).
        prefix: PathBuf,
        /// Strategy whose freeze mask to report the trainable fraction for.
        #[arg(long)]
        strategy: Option<String>,
        /// Experiment config supplying the adapter spec for tail strategies.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Repeat the curriculum across adapter ranks (or method combinations).
    SweepRank {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated rank list, e.g. 2,4,8,16.
        #[arg(long)]
        ranks: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Sweep integration-method combinations instead of ranks.
        #[arg(long)]
        combinations: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let deterministic = std::env::var("TAIL_DETERMINISTIC").as_deref() == Ok("1");
    let threads = if deterministic { Some(1) } else { cli.workers };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--workers must be >= 1".into()));
        }
        // ignore AlreadyInitialized: tests may drive run() repeatedly
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.cmd {
        Cmd::GenData { config, out, seed } => commands::gen_data(&config, &out, seed),
        Cmd::Pretrain {
            config,
            out,
            seed,
            resume,
        } => commands::pretrain(&config, &out, seed, resume),
        Cmd::Adapt {
            config,
            base,
            strategy,
            out,
            seed,
        } => commands::adapt(&config, &base, &strategy, &out, seed),
        Cmd::Eval {
            config,
            base,
            bundle,
            stage,
            seed,
        } => commands::eval(&config, &base, bundle.as_deref(), stage, seed),
        Cmd::Metrics { inputs, out } => commands::metrics(&inputs, out.as_deref()),
        Cmd::Inspect {
            prefix,
            strategy,
            config,
        } => commands::inspect(&prefix, strategy.as_deref(), config.as_deref()),
        Cmd::SweepRank {
            config,
            ranks,
            out,
            combinations,
            seed,
        } => commands::sweep_rank(&config, ranks.as_deref(), &out, combinations, seed),
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
