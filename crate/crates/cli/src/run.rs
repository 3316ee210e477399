use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::process::ExitCode;

use desense_kf::export::{write_cost_csv, write_rms_csv};
use desense_kf::montecarlo::{run_experiment_timed, FailedCase};
use desense_kf::ExperimentConfig;
use serde::Serialize;

use crate::{EXIT_CONFIG, EXIT_EXPERIMENT};

pub const RMS_FILE: &str = "rms.csv";
pub const COST_FILE: &str = "cost.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct SchemeFiles {
    rms: &'static str,
    cost: &'static str,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
    /// Every file written to the output directory, this manifest included.
    files: [&'static str; 3],
    /// Tables are long-format, so all schemes share the same two files.
    schemes: BTreeMap<&'a str, SchemeFiles>,
    failed_cases: usize,
    failures: &'a [FailedCase],
    duration_s: f64,
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    // serde_json's message already carries "at line L column C".
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(cfg)
}

pub fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, jobs: Option<usize>, verbose: bool) -> ExitCode {
    let mut cfg = match load_config(config) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("config error: {}: {e}", config.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    if jobs == Some(0) {
        eprintln!("config error: --jobs must be at least 1");
        return ExitCode::from(EXIT_CONFIG);
    }
    if verbose {
        eprintln!(
            "running {} cases x {} epochs, {} schemes, seed {}",
            cfg.n_cases,
            cfg.n_epochs,
            cfg.schemes.len(),
            cfg.seed
        );
    }

    let (report, duration) = match run_experiment_timed(&cfg, jobs) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("experiment failed: {e}");
            return ExitCode::from(EXIT_EXPERIMENT);
        }
    };
    if verbose {
        eprintln!("finished in {duration:.2}s, {} failed cases", report.failed.len());
        for f in &report.failed {
            eprintln!("  case {}: {}", f.case_index, f.reason);
        }
    }

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: &cfg,
        files: [RMS_FILE, COST_FILE, MANIFEST_FILE],
        schemes: cfg.schemes.iter().map(|s| (s.name.as_str(), SchemeFiles { rms: RMS_FILE, cost: COST_FILE })).collect(),
        failed_cases: report.failed.len(),
        failures: &report.failed,
        duration_s: duration,
    };
    let written = (|| -> Result<(), Box<dyn std::error::Error>> {
        fs::create_dir_all(out)?;
        write_rms_csv(&report, BufWriter::new(File::create(out.join(RMS_FILE))?))?;
        write_cost_csv(&report, BufWriter::new(File::create(out.join(COST_FILE))?))?;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(out.join(MANIFEST_FILE), text)?;
        Ok(())
    })();
    if let Err(e) = written {
        eprintln!("cannot write outputs to {}: {e}", out.display());
        return ExitCode::from(EXIT_EXPERIMENT);
    }
    if verbose {
        eprintln!("wrote {}", out.display());
    }
    ExitCode::SUCCESS
}
