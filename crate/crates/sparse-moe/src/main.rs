//! Command-line front end: train the toy language model, evaluate
//! checkpoints, sweep the parallelism cost model, and run the gradient
//! checker.

use clap::{Parser, Subcommand};
use sparse_moe::gradcheck;
use sparse_moe::harness::{evaluate_checkpoint, train, ToyLmConfig};
use sparse_moe::sim::{efficiency_sweep, parse_sweep_config};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sparse-moe", about = "Sparsely-gated mixture-of-experts tools", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config and write checkpoint, metrics, and
    /// report into the output directory.
    Train {
        /// TOML training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoint.bin, metrics.csv, report.txt.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report eval perplexity of a checkpoint.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional text file to evaluate on instead of the checkpointed
        /// corpus setting.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict device efficiency for cluster specs ([[spec]] entries in
    /// TOML) and emit a CSV sweep.
    Simulate {
        /// TOML file with one or more [[spec]] tables.
        #[arg(long)]
        config: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and print one line per check.
    CheckGrads {
        /// Seed for the suite's random inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> sparse_moe::Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out_dir,
            seed,
        } => {
            let mut cfg = ToyLmConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let artifacts = train(&cfg, &out_dir)?;
            let last = artifacts.final_record;
            println!(
                "step {} train_loss {:.6} eval_perplexity {:.6} cv_importance {:.4} cv_load {:.4}",
                last.step, last.train_loss, last.eval_perplexity, last.cv_importance, last.cv_load
            );
            println!("checkpoint {}", artifacts.checkpoint_path.display());
            println!("metrics    {}", artifacts.metrics_path.display());
            println!("report     {}", artifacts.report_path.display());
            Ok(true)
        }
        Command::Eval { checkpoint, data } => {
            let ppl = evaluate_checkpoint(&checkpoint, data.as_deref())?;
            println!("eval_perplexity {ppl:.6}");
            Ok(true)
        }
        Command::Simulate { config, out } => {
            let text = std::fs::read_to_string(&config)?;
            let specs = parse_sweep_config(&text)?;
            let csv = efficiency_sweep(&specs)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    println!("wrote {} rows to {}", specs.len(), path.display());
                }
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::CheckGrads { seed } => {
            let outcomes = gradcheck::run_full_suite(seed)?;
            let mut all_ok = true;
            for o in &outcomes {
                let status = if o.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status} {:<28} max_rel_err {:.3e} coords {:>4} ({} ms)",
                    o.name, o.max_rel_err, o.coords_checked, o.elapsed_ms
                );
                all_ok &= o.passed();
            }
            println!(
                "{} checks, tolerance {:.0e}: {}",
                outcomes.len(),
                gradcheck::FD_TOL,
                if all_ok { "all passed" } else { "FAILURES" }
            );
            Ok(all_ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
