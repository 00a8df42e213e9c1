//! CSV exports: training logs, evaluation/comparison tables, convergence
//! curves and frequency histograms.
//!
//! Floats use Rust's shortest round-trip formatting; `+inf` (a perfect
//! reconstruction) is written as `inf`. Wall-clock time is never written, so
//! the files are byte-identical across runs with the same seeds.

use std::collections::BTreeSet;
use std::path::Path;

use implisat_core::metrics::{ComparisonTable, EvalReport, FrequencyHistogram};
use implisat_core::train::TrainLog;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn parse_f64(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        _ => s.parse().ok(),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })
}

/// `iteration,loss,eval_mse,eval_psnr,best_mse,psnr_<band>...`
pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["iteration", "loss", "eval_mse", "eval_psnr", "best_mse"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(log.band_names.iter().map(|b| format!("psnr_{b}")));
    w.write_record(&header)?;
    for e in &log.entries {
        let mut row = vec![
            e.iteration.to_string(),
            fmt_f64(e.loss),
            fmt_f64(e.eval_mse),
            fmt_f64(e.eval_psnr),
            fmt_f64(e.best_mse),
        ];
        row.extend(e.band_psnr.iter().map(|&p| fmt_f64(p)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `(iteration, eval_psnr)` pairs from a file written by [`write_train_log`].
pub fn read_train_log_psnr(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))
    };
    let (it, psnr) = (col("iteration")?, col("eval_psnr")?);
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let bad = || Error::Format(format!("{}: malformed row {:?}", path.display(), record));
        let i = record[it].parse().map_err(|_| bad())?;
        let p = parse_f64(&record[psnr]).ok_or_else(bad)?;
        out.push((i, p));
    }
    Ok(out)
}

/// `method,band,psnr_db,mse`; band `all` is the pooled aggregate.
pub fn write_comparison(path: &Path, table: &ComparisonTable) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "band", "psnr_db", "mse"])?;
    for row in &table.rows {
        w.write_record([row.method.as_str(), row.band.as_str(), &fmt_f64(row.psnr_db), &fmt_f64(row.mse)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Single-report version of [`write_comparison`].
pub fn write_eval(path: &Path, report: &EvalReport) -> Result<()> {
    write_comparison(path, &implisat_core::metrics::compare(std::slice::from_ref(report))?)
}

/// `iteration,<method>...`: evaluation PSNR per method at every logged
/// iteration; empty where a method has no entry.
pub fn write_convergence(path: &Path, curves: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(curves.iter().map(|(m, _)| m.clone()));
    w.write_record(&header)?;
    let iterations: BTreeSet<usize> = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).collect();
    for it in iterations {
        let mut row = vec![it.to_string()];
        for (_, curve) in curves {
            row.push(curve.iter().find(|p| p.0 == it).map_or(String::new(), |p| fmt_f64(p.1)));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `group,bin_left,bin_right,density`; `group` is the GSD in meters.
pub fn write_histogram(path: &Path, hist: &FrequencyHistogram) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["group", "bin_left", "bin_right", "density"])?;
    for g in &hist.groups {
        for (i, d) in g.densities.iter().enumerate() {
            w.write_record([fmt_f64(g.gsd_m), fmt_f64(g.bin_edges[i]), fmt_f64(g.bin_edges[i + 1]), fmt_f64(*d)])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
