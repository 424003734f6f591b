//! Compression/accuracy trade-off summary over replications.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{read_metrics, MetricRow};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Spread {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = match n {
            0 => return None,
            _ if n % 2 == 1 => v[n / 2],
            _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
        };
        Some(Self {
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffRow {
    pub c: f64,
    pub runs: usize,
    pub compression: Spread,
    pub accuracy: Spread,
}

/// Groups final rows by `C`, sorted by median compression.
pub fn summarize(rows: &[MetricRow]) -> Vec<TradeoffRow> {
    let mut cs: Vec<f64> = rows.iter().filter(|r| r.is_final()).map(|r| r.c).collect();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    let mut out: Vec<TradeoffRow> = cs
        .into_iter()
        .filter_map(|c| {
            let group: Vec<&MetricRow> = rows.iter().filter(|r| r.is_final() && r.c == c).collect();
            let comp: Vec<f64> = group.iter().map(|r| r.compression_rate).collect();
            let acc: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            Some(TradeoffRow {
                c,
                runs: group.len(),
                compression: Spread::of(&comp)?,
                accuracy: Spread::of(&acc)?,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.compression
            .median
            .total_cmp(&b.compression.median)
            .then(a.c.total_cmp(&b.c))
    });
    out
}

/// Reads every `*.csv` metrics file in `dir` (non-recursive).
pub fn collect_dir(dir: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|n| n != "report.csv")
        })
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(read_metrics(p)?);
    }
    if rows.iter().all(|r| !r.is_final()) {
        return Err(Error::InvalidArgument(format!(
            "{}: no final metric rows found",
            dir.display()
        )));
    }
    Ok(rows)
}

pub fn to_text(rows: &[TradeoffRow]) -> String {
    let mut s = format!(
        "{:>10} {:>4} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}\n",
        "C", "runs", "comp_min", "comp_med", "comp_max", "acc_min", "acc_med", "acc_max"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>10.4e} {:>4} {:>10.2} {:>10.2} {:>10.2} {:>8.4} {:>8.4} {:>8.4}",
            r.c,
            r.runs,
            r.compression.min,
            r.compression.median,
            r.compression.max,
            r.accuracy.min,
            r.accuracy.median,
            r.accuracy.max
        );
    }
    s
}

pub fn write_csv(rows: &[TradeoffRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "C",
        "runs",
        "compression_min",
        "compression_median",
        "compression_max",
        "accuracy_min",
        "accuracy_median",
        "accuracy_max",
    ])?;
    for r in rows {
        let (c, a) = (r.compression, r.accuracy);
        w.write_record(
            [
                r.c,
                r.runs as f64,
                c.min,
                c.median,
                c.max,
                a.min,
                a.median,
                a.max,
            ]
            .map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}
