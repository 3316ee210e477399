use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use desense_kf::export::{format_real, read_cost_csv, read_rms_csv};

use crate::run::{COST_FILE, RMS_FILE};
use crate::EXIT_CONFIG;

/// One run's tables as `scheme -> metric -> per-epoch series`.
struct RunTables {
    dir: PathBuf,
    n_epochs: usize,
    series: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

fn load_run(dir: &Path) -> Result<RunTables, String> {
    let open = |name: &str| {
        let path = dir.join(name);
        File::open(&path).map(BufReader::new).map_err(|e| format!("cannot open {}: {e}", path.display()))
    };
    let rms = read_rms_csv(open(RMS_FILE)?).map_err(|e| format!("{}: {e}", dir.join(RMS_FILE).display()))?;
    let cost = read_cost_csv(open(COST_FILE)?).map_err(|e| format!("{}: {e}", dir.join(COST_FILE).display()))?;

    let n_rms = rms.iter().map(|r| r.epoch).max().unwrap_or(0);
    let n_cost = cost.iter().map(|r| r.epoch).max().unwrap_or(0);
    if n_rms != n_cost {
        return Err(format!("{}: rms.csv has {n_rms} epochs but cost.csv has {n_cost}", dir.display()));
    }
    let n_epochs = n_rms;
    if n_epochs == 0 {
        return Err(format!("{}: tables are empty", dir.display()));
    }

    let mut series: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut put = |scheme: &str, metric: String, epoch: usize, v: f64| {
        series
            .entry(scheme.to_owned())
            .or_default()
            .entry(metric)
            .or_insert_with(|| vec![f64::NAN; n_epochs])[epoch - 1] = v;
    };
    for r in &rms {
        if r.epoch == 0 {
            return Err(format!("{}: epoch numbers start at 1", dir.display()));
        }
        put(&r.scheme, format!("rms_x{}", r.state_index + 1), r.epoch, r.rms);
    }
    for r in &cost {
        if r.epoch == 0 {
            return Err(format!("{}: epoch numbers start at 1", dir.display()));
        }
        put(&r.scheme, "mean_cost".into(), r.epoch, r.mean_cost);
        put(&r.scheme, "mean_penalty".into(), r.epoch, r.mean_penalty);
    }
    for (scheme, metrics) in &series {
        for (metric, values) in metrics {
            if let Some(k) = values.iter().position(|v| v.is_nan()) {
                return Err(format!("{}: {scheme}/{metric} has no value at epoch {}", dir.display(), k + 1));
            }
        }
    }
    Ok(RunTables { dir: dir.to_owned(), n_epochs, series })
}

fn average_from(values: &[f64], from_epoch: usize) -> f64 {
    let tail = &values[from_epoch - 1..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

pub fn cmd_compare(dirs: &[PathBuf], from_epoch: usize, deltas_out: Option<&Path>) -> ExitCode {
    let runs = match dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>() {
        Ok(r) => r,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let base = &runs[0];
    if let Some(other) = runs.iter().find(|r| r.n_epochs != base.n_epochs) {
        eprintln!(
            "error: epoch counts differ: {} has {}, {} has {}",
            base.dir.display(),
            base.n_epochs,
            other.dir.display(),
            other.n_epochs
        );
        return ExitCode::from(EXIT_CONFIG);
    }
    if from_epoch == 0 || from_epoch > base.n_epochs {
        eprintln!("error: --from-epoch must lie in 1..={}", base.n_epochs);
        return ExitCode::from(EXIT_CONFIG);
    }

    println!("epoch-averaged summaries (epochs {from_epoch}..{})", base.n_epochs);
    for (i, run) in runs.iter().enumerate() {
        println!("[{i}] {}", run.dir.display());
        for (scheme, metrics) in &run.series {
            let cells: Vec<String> = metrics
                .iter()
                .map(|(m, v)| format!("{m}={:.6}", average_from(v, from_epoch)))
                .collect();
            println!("    {scheme:<16} {}", cells.join("  "));
        }
    }

    let mut rows = Vec::new();
    if runs.len() > 1 {
        println!("deltas against [0] (run − baseline): epoch-averaged, max |Δ| over all epochs");
    }
    for (i, run) in runs.iter().enumerate().skip(1) {
        for (scheme, metrics) in &run.series {
            let Some(base_metrics) = base.series.get(scheme) else {
                println!("[{i}] {scheme:<16} not present in baseline");
                continue;
            };
            for (metric, values) in metrics {
                let Some(base_values) = base_metrics.get(metric) else { continue };
                let delta: Vec<f64> = values.iter().zip(base_values).map(|(v, b)| v - b).collect();
                let max_abs = delta.iter().fold(0.0_f64, |a, d| a.max(d.abs()));
                println!(
                    "[{i}] {scheme:<16} {metric:<13} avg Δ {:+.6e}  max |Δ| {max_abs:.6e}",
                    average_from(&delta, from_epoch)
                );
                for (k, d) in delta.iter().enumerate() {
                    rows.push((i, k + 1, scheme.clone(), metric.clone(), base_values[k], values[k], *d));
                }
            }
        }
    }

    if let Some(path) = deltas_out {
        let written = (|| -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "run,epoch,scheme,metric,baseline,value,delta")?;
            for (run, epoch, scheme, metric, b, v, d) in &rows {
                writeln!(w, "{run},{epoch},{scheme},{metric},{},{},{}", format_real(*b), format_real(*v), format_real(*d))?;
            }
            w.flush()
        })();
        if let Err(e) = written {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}
