use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sparling::training::EvalSet;
use sparling_harness::config::RunConfig;
use sparling_harness::eval::binning;
use sparling_harness::run::{self, write_json, EvalSource};

#[derive(Parser)]
#[command(name = "sparling", about = "Sparse motif bottleneck experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset drawn from the stream for a seed.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<i64>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate it on the test set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a generated or stored dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; without it examples are generated from `--seed`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = -2)]
        seed: i64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 4.0)]
        eta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every density plateau of a finished run.
    Sweep {
        #[arg(long)]
        run: PathBuf,
    },
    /// L1 and KL baselines next to the sparsity layer under one budget.
    Baselines {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<i64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,2,5,10")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        kl_lambda: f64,
        #[arg(long, default_value_t = 0.001)]
        kl_rho: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seed-level means, bootstrap intervals and rank correlations.
    Aggregate {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop the thresholds of a finished run and refit the decoder.
    Retrain {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Quantize bottleneck activations and report the E2EE cost per bit depth.
    Binning {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = -2)]
        seed: i64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        ks: Vec<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<i64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        write_json(path, value)?;
    }
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, count, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let ds = run::generate_dataset(&cfg.domain, cfg.seed, count, &out)?;
            eprintln!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let report = run::train_run(&cfg, &out)?;
            print_json(&report, None)?;
        }
        Command::Eval {
            checkpoint,
            data,
            seed,
            count,
            eta,
            out,
        } => {
            let source = match &data {
                Some(p) => EvalSource::File(p),
                None => EvalSource::Seed { seed, count },
            };
            let report = run::eval_checkpoint(&checkpoint, source, eta)?;
            print_json(&report, out.as_deref())?;
        }
        Command::Sweep { run: dir } => {
            let (rows, warnings) = run::sweep(&dir)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("{} plateaus written to {}", rows.len(), dir.join("sweep.csv").display());
        }
        Command::Baselines {
            config,
            seed,
            lambdas,
            kl_lambda,
            kl_rho,
            out,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let rows = run::baselines(&cfg, &lambdas, (kl_lambda, kl_rho), &out)?;
            print!("{}", run::baselines_csv(&rows));
        }
        Command::Aggregate { runs, out } => {
            let agg = run::aggregate(&runs, &out)?;
            print_json(&agg, None)?;
        }
        Command::Retrain { run: dir, budget } => {
            let report = run::retrain(&dir, budget)?;
            print_json(&report, None)?;
        }
        Command::Binning {
            checkpoint,
            seed,
            count,
            ks,
            out,
        } => {
            let (mut model, info) = run::load_checkpoint(&checkpoint)?;
            let set = EvalSet::generate(&info.domain, seed, count)?;
            let (baseline, rows, eta) = binning(&mut model, &set, &ks)?;
            print_json(
                &serde_json::json!({ "baseline_e2ee": baseline, "rows": rows, "eta": eta }),
                out.as_deref(),
            )?;
        }
    }
    Ok(())
}

/// 2 for configuration and validation problems, 3 for numerical divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    use sparling::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite(_) => 3,
                E::InvalidArgument(_) | E::InvalidSpec(_) | E::Validation(_) | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
