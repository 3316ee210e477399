mod compare;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use desense_kf::verify::{self, VerifyOptions};

/// Exit status for invalid configuration or inputs.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status when the experiment itself cannot complete.
pub const EXIT_EXPERIMENT: u8 = 3;

#[derive(Parser)]
#[command(name = "desense-kf", version, about = "Desensitized Kalman filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and write rms.csv, cost.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long, env = "DESENSE_KF_SEED")]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        verbose: bool,
    },
    /// Run the numerical self-checks; exit 1 if any fails.
    Verify {
        #[arg(long)]
        verbose: bool,
        #[arg(long, default_value_t = VerifyOptions::default().seed)]
        seed: u64,
        /// Negative control: offset every gain entry before the stationarity checks.
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_gain: f64,
    },
    /// Join the tables of several runs; deltas are taken against the first.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// First epoch of the epoch-averaged summaries.
        #[arg(long, default_value_t = 10)]
        from_epoch: usize,
        /// Also write the full long-format delta table here.
        #[arg(long)]
        deltas: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, seed, jobs, verbose } => run::cmd_run(&config, &out, seed, jobs, verbose),
        Command::Verify { verbose, seed, perturb_gain } => cmd_verify(seed, perturb_gain, verbose),
        Command::Compare { runs, from_epoch, deltas } => compare::cmd_compare(&runs, from_epoch, deltas.as_deref()),
    }
}

fn cmd_verify(seed: u64, perturb_gain: f64, verbose: bool) -> ExitCode {
    let opts = VerifyOptions { seed, gain_perturbation: perturb_gain, ..VerifyOptions::default() };
    let outcomes = match verify::run_all(&opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: verification aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        if verbose {
            let margin = if o.worst > 0.0 { o.tolerance / o.worst } else { f64::INFINITY };
            println!(
                "{status}  {:<28} worst {:.3e}  tol {:.0e}  margin {margin:.3e}x  cases {}",
                o.name, o.worst, o.tolerance, o.cases
            );
        } else {
            println!("{status}  {}", o.name);
        }
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
