use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::experiment::{Aggregate, ResultSet};
use crate::error::Result;

/// Column order of the aggregate CSV.
pub const AGGREGATE_COLUMNS: [&str; 13] = [
    "sweep_value",
    "snr_db",
    "trials",
    "nmse_trials",
    "nmse",
    "nmse_db",
    "misses",
    "false_alarms",
    "p_miss",
    "p_false",
    "pe",
    "lambda_hat",
    "mean_iterations",
];

pub const ROC_COLUMNS: [&str; 5] = ["sweep_value", "snr_db", "threshold", "p_miss", "p_false"];

pub const ITERATION_COLUMNS: [&str; 12] = [
    "sweep_value",
    "snr_db",
    "trial",
    "iter",
    "v_h",
    "v_c",
    "sigma_w2",
    "lambda",
    "theta_h",
    "theta_c",
    "rel_change",
    "nmse",
];

#[derive(Serialize)]
struct AggregateRow {
    sweep_value: Option<f64>,
    snr_db: f64,
    trials: usize,
    nmse_trials: usize,
    nmse: Option<f64>,
    nmse_db: Option<f64>,
    misses: usize,
    false_alarms: usize,
    p_miss: f64,
    p_false: f64,
    pe: f64,
    lambda_hat: f64,
    mean_iterations: f64,
}

impl From<&Aggregate> for AggregateRow {
    fn from(a: &Aggregate) -> Self {
        Self {
            sweep_value: a.sweep_value,
            snr_db: a.snr_db,
            trials: a.trials,
            nmse_trials: a.nmse_trials,
            nmse: a.nmse,
            nmse_db: a.nmse_db,
            misses: a.misses,
            false_alarms: a.false_alarms,
            p_miss: a.p_miss,
            p_false: a.p_false,
            pe: a.pe,
            lambda_hat: a.lambda_hat,
            mean_iterations: a.mean_iterations,
        }
    }
}

fn writer<W: Write>(inner: W, header: &[&str]) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
    w.write_record(header)?;
    Ok(w)
}

/// Aggregate rows as CSV; an empty result set gives a header-only file.
pub fn write_aggregates_csv<W: Write>(results: &ResultSet, out: W) -> Result<()> {
    let mut w = writer(out, &AGGREGATE_COLUMNS)?;
    for a in &results.aggregates {
        w.serialize(AggregateRow::from(a))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_roc_csv<W: Write>(results: &ResultSet, out: W) -> Result<()> {
    let mut w = writer(out, &ROC_COLUMNS)?;
    for a in &results.aggregates {
        for p in &a.roc {
            w.serialize((a.sweep_value, a.snr_db, p.threshold, p.p_miss, p.p_false))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_iterations_csv<W: Write>(results: &ResultSet, out: W) -> Result<()> {
    let mut w = writer(out, &ITERATION_COLUMNS)?;
    for t in &results.trials {
        for d in &t.diagnostics {
            w.serialize((
                t.sweep_value,
                t.snr_db,
                t.trial,
                d.iter,
                d.v_h,
                d.v_c,
                d.sigma_w2,
                d.lambda,
                d.theta_h,
                d.theta_c,
                d.rel_change,
                d.nmse,
            ))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(results: &ResultSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(results)?)
}

pub fn from_json(text: &str) -> Result<ResultSet> {
    Ok(serde_json::from_str(text)?)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    base.with_file_name(name)
}

/// Writes `<base>.csv` and `<base>.json`, plus `<base>_roc.csv` and
/// `<base>_iterations.csv` when the results contain ROC points or
/// per-iteration diagnostics. Returns the written paths.
pub fn emit_results(results: &ResultSet, base: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let base = base.as_ref();
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut written = Vec::new();
    let csv_path = with_suffix(base, ".csv");
    write_aggregates_csv(results, File::create(&csv_path)?)?;
    written.push(csv_path);

    let json_path = with_suffix(base, ".json");
    fs::write(&json_path, to_json(results)?)?;
    written.push(json_path);

    if results.aggregates.iter().any(|a| !a.roc.is_empty()) {
        let p = with_suffix(base, "_roc.csv");
        write_roc_csv(results, File::create(&p)?)?;
        written.push(p);
    }
    if results.trials.iter().any(|t| !t.diagnostics.is_empty()) {
        let p = with_suffix(base, "_iterations.csv");
        write_iterations_csv(results, File::create(&p)?)?;
        written.push(p);
    }
    Ok(written)
}
