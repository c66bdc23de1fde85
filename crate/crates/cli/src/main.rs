use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ntkfed_cli::commands;
use ntkfed_cli::verify;
use ntkfed_cli::{parse_config, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ntkfed", version, about = "Federated learning via neural tangent kernel evolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "NTKFED_THREADS")]
    threads: Option<usize>,
    /// Output directory; defaults to the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the client partition and its class histograms.
    Partition(Common),
    /// Run the configured scheme and write metrics.csv and weights.bin.
    Train(Common),
    /// Rounds to the target accuracy for each configured scheme.
    Compare(Common),
    /// Run the property checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run a single check.
        #[arg(long)]
        only: Option<String>,
    },
    /// Uplink bytes per round for each scheme.
    CommReport(Common),
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Partition(c) => {
            let (cfg, out) = setup(&c)?;
            let path = commands::cmd_partition(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let (cfg, out) = setup(&c)?;
            let trace = commands::cmd_train(&cfg, &out)?;
            if let Some(m) = trace.metrics.last() {
                println!(
                    "{} rounds of {}; final test accuracy {:.4}",
                    trace.metrics.len(),
                    m.scheme,
                    m.test_acc.unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", out.join("metrics.csv").display());
        }
        Command::Compare(c) => {
            let (cfg, out) = setup(&c)?;
            let rows = commands::cmd_compare(&cfg, &out)?;
            println!("{:<12} {:>5} {:>16} {:>12}", "scheme", "tau", "rounds", "uplink MB");
            for r in rows {
                println!(
                    "{:<12} {:>5} {:>16} {:>12.3}",
                    r.scheme.name(),
                    r.tau.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
                    r.rounds_to_target
                        .map(|t| t.to_string())
                        .unwrap_or_else(|| "not reached".into()),
                    r.uplink_mb
                );
            }
        }
        Command::Verify { common, only } => {
            let (cfg, out) = setup(&common)?;
            let outcomes = verify::run_checks(&cfg, only.as_deref())?;
            verify::write_report(&outcomes, &out.join("verify.csv"))?;
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<14} {}", o.name, o.detail);
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
        Command::CommReport(c) => {
            let (cfg, out) = setup(&c)?;
            for r in commands::cmd_comm_report(&cfg, &out)? {
                println!("{:<10} {:>16} bytes/round", r.scheme.name(), r.bytes_per_round);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
