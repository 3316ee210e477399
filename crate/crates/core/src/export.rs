//! Long-format CSV tables for experiment reports.
//!
//! `rms.csv`: `epoch,scheme,state_index,rms`
//! `cost.csv`: `epoch,scheme,mean_cost,mean_penalty`
//!
//! Reals are written in scientific notation with 17 significant digits so
//! values round-trip exactly and files are byte-stable for a fixed input.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::montecarlo::ExperimentReport;

pub const RMS_HEADER: [&str; 4] = ["epoch", "scheme", "state_index", "rms"];
pub const COST_HEADER: [&str; 4] = ["epoch", "scheme", "mean_cost", "mean_penalty"];

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_rms_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RMS_HEADER)?;
    for k in 0..report.n_epochs {
        for (s, name) in report.scheme_names.iter().enumerate() {
            for j in 0..report.n_states {
                w.write_record([
                    (k + 1).to_string(),
                    name.clone(),
                    j.to_string(),
                    format_real(report.rms[s][k][j]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cost_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COST_HEADER)?;
    for k in 0..report.n_epochs {
        for (s, name) in report.scheme_names.iter().enumerate() {
            w.write_record([
                (k + 1).to_string(),
                name.clone(),
                format_real(report.mean_cost[s][k]),
                format_real(report.mean_penalty[s][k]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsRow {
    pub epoch: usize,
    pub scheme: String,
    pub state_index: usize,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub epoch: usize,
    pub scheme: String,
    pub mean_cost: f64,
    pub mean_penalty: f64,
}

fn read_table<R: Read>(input: R, header: [&str; 4]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let found: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Config(format!("unexpected CSV header {found:?}, expected {header:?}")));
    }
    r.records().map(|rec| rec.map_err(Error::from)).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let line = rec.position().map_or(0, |p| p.line());
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("line {line}: cannot parse column {i}")))
}

pub fn read_rms_csv<R: Read>(input: R) -> Result<Vec<RmsRow>> {
    read_table(input, RMS_HEADER)?
        .iter()
        .map(|rec| {
            Ok(RmsRow {
                epoch: field(rec, 0)?,
                scheme: field(rec, 1)?,
                state_index: field(rec, 2)?,
                rms: field(rec, 3)?,
            })
        })
        .collect()
}

pub fn read_cost_csv<R: Read>(input: R) -> Result<Vec<CostRow>> {
    read_table(input, COST_HEADER)?
        .iter()
        .map(|rec| {
            Ok(CostRow {
                epoch: field(rec, 0)?,
                scheme: field(rec, 1)?,
                mean_cost: field(rec, 2)?,
                mean_penalty: field(rec, 3)?,
            })
        })
        .collect()
}
