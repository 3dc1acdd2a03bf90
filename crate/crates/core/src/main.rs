use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use eh_sense::cli::{cmd_simulate, cmd_solve, cmd_sweep, cmd_verify, RunConfig};
use eh_sense::sim::PolicyKind;

#[derive(Parser)]
#[command(
    version,
    about = "Transmission scheduling for an energy-harvesting sensor with costly channel sensing"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` from the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Optimal,
    Single,
    Greedy,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Optimal => PolicyKind::Optimal,
            PolicyArg::Single => PolicyKind::SingleThreshold,
            PolicyArg::Greedy => PolicyKind::Greedy,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the optimal policy; writes value_table.csv, policy_map.csv, thresholds.csv.
    Solve(Common),
    /// Throughput of all policies over `q_values`; writes sweep.csv.
    Sweep(Common),
    /// Simulate one policy; writes simulate.csv (and trace.csv with --trace).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "optimal")]
        policy: PolicyArg,
        /// Record the per-slot trace of the first replication.
        #[arg(long)]
        trace: bool,
    },
    /// Run the verification suite, or check an exported value table; writes verify.csv.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Value-table CSV to check for convexity and monotonicity.
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| config.out_dir.clone());
    Ok((config, out))
}

fn run() -> Result<ExitCode> {
    match Args::parse().command {
        Command::Solve(common) => {
            let (config, out) = load(&common)?;
            let summary = cmd_solve(&config, &out).context("solve failed")?;
            println!(
                "iterations {}  final delta {:e}",
                summary.iterations, summary.final_delta
            );
            println!("sensing cells {}", summary.sense_cells);
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Sweep(common) => {
            let (config, out) = load(&common)?;
            let path = cmd_sweep(&config, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Simulate {
            common,
            policy,
            trace,
        } => {
            let (config, out) = load(&common)?;
            let (runs, files) = cmd_simulate(&config, &out, policy.into(), trace)?;
            let mean = runs.iter().map(|r| r.throughput).sum::<f64>() / runs.len() as f64;
            println!(
                "mean throughput {mean:.6} bits/slot over {} runs",
                runs.len()
            );
            for f in &files {
                println!("wrote {}", f.display());
            }
        }
        Command::Verify { common, table } => {
            let (config, out) = load(&common)?;
            let (passed, reports) = cmd_verify(&config, &out, table.as_deref())?;
            for r in &reports {
                println!("{r}");
            }
            if !passed {
                eprintln!("verification failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
