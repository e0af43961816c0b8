use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedhet::analysis::Param;
use fedhet_cli::{cmd_analyze, cmd_partition, cmd_sweep, cmd_train, AnalyzeOptions, CliError, RunOptions};

#[derive(Parser)]
#[command(version, about = "Federated learning under label and quantity skew", long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run spec (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces every seed in the spec.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a dataset and report its EMD and IID level.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// EMD over a grid of labels-per-device and quantity variance.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parallel partition builds (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one federated experiment.
    Train {
        #[command(flatten)]
        common: Common,
        /// Parallel local training; results do not depend on it.
        #[arg(long)]
        workers: Option<usize>,
        /// Record wall time per round (the log is then no longer reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Compare finished runs.
    Analyze {
        /// Result files or run directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        smooth_window: usize,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        /// active_count, epochs, batch_size, var, k, max_samples or lr.
        #[arg(long, default_value = "active_count")]
        group_by: String,
        #[arg(long)]
        overwrite: bool,
    },
}

fn run_options(c: Common, workers: Option<usize>, timings: bool) -> RunOptions {
    RunOptions {
        config: c.config,
        seed: c.seed,
        out: c.out,
        workers,
        overwrite: c.overwrite,
        timings,
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Partition { common } => {
            let outcome = cmd_partition(&run_options(common, None, false))?;
            println!("{}", outcome.summary);
            println!("wrote {}", outcome.out.display());
        }
        Command::Sweep { common, workers } => {
            let sweep = cmd_sweep(&run_options(common, workers, false))?;
            println!("k,var,mean_emd");
            for c in &sweep.cells {
                println!("{},{},{:.4}", c.k, c.var, c.mean_emd);
            }
        }
        Command::Train {
            common,
            workers,
            timings,
        } => {
            let outcome = cmd_train(&run_options(common, workers, timings))?;
            let r = &outcome.result;
            let level = r.iid_level.map_or_else(|| "n/a".to_string(), |l| l.to_string());
            println!(
                "{} on {}: best macro F1 {:.4} at round {} (EMD {:.3}, IID {})",
                r.config.aggregator, r.config.dataset, r.best_f1, r.best_round, r.emd, level
            );
            println!("wrote {}", outcome.out.display());
        }
        Command::Analyze {
            inputs,
            out,
            smooth_window,
            sigma,
            group_by,
            overwrite,
        } => {
            let group_by = Param::parse(&group_by).map_err(|e| CliError::Config(e.to_string()))?;
            let rows = cmd_analyze(&AnalyzeOptions {
                inputs,
                out,
                smooth_window,
                sigma,
                group_by,
                overwrite,
            })?;
            println!("{}", fedhet_cli::ANALYZE_HEADER);
            for r in &rows {
                let t = &r.row;
                println!(
                    "{},{},{},{},{},{:.4},{},{},{:.4},{}",
                    t.dataset,
                    t.iid_level,
                    t.param,
                    t.param_value,
                    t.aggregator,
                    t.best_f1,
                    t.best_round,
                    t.is_best,
                    r.raw_best_f1,
                    r.raw_best_round
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedhet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
