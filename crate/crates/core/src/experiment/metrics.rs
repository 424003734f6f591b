//! Metrics CSV rows.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::EpochMetrics;

pub const HEADER: [&str; 10] = [
    "replication",
    "stage",
    "epoch",
    "split",
    "loss",
    "accuracy",
    "kl_term",
    "compression_rate",
    "tau",
    "C",
];

/// Stage label of the trade-off row written once per run.
pub const FINAL_STAGE: &str = "final";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub replication: u64,
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub kl_term: f64,
    pub compression_rate: f64,
    pub tau: f64,
    pub c: f64,
}

impl MetricRow {
    pub fn from_epoch(m: &EpochMetrics, replication: u64, tau: f64, c: f64) -> Self {
        Self {
            replication,
            stage: m.stage.to_string(),
            epoch: m.epoch,
            split: m.split.clone(),
            loss: m.loss,
            accuracy: m.accuracy,
            kl_term: m.kl_term,
            compression_rate: m.compression_rate,
            tau,
            c,
        }
    }

    pub fn is_final(&self) -> bool {
        self.stage == FINAL_STAGE
    }

    fn fields(&self) -> [String; 10] {
        [
            self.replication.to_string(),
            self.stage.clone(),
            self.epoch.to_string(),
            self.split.clone(),
            self.loss.to_string(),
            self.accuracy.to_string(),
            self.kl_term.to_string(),
            self.compression_rate.to_string(),
            self.tau.to_string(),
            self.c.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != HEADER.len() {
            return Err(Error::InvalidArgument(format!(
                "metrics row has {} fields, expected {}",
                rec.len(),
                HEADER.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| {
                Error::InvalidArgument(format!("column `{}`: bad number `{}`", HEADER[i], &rec[i]))
            })
        };
        let int = |i: usize| -> Result<u64> {
            rec[i].parse().map_err(|_| {
                Error::InvalidArgument(format!("column `{}`: bad integer `{}`", HEADER[i], &rec[i]))
            })
        };
        Ok(Self {
            replication: int(0)?,
            stage: rec[1].to_string(),
            epoch: int(2)? as usize,
            split: rec[3].to_string(),
            loss: num(4)?,
            accuracy: num(5)?,
            kl_term: num(6)?,
            compression_rate: num(7)?,
            tau: num(8)?,
            c: num(9)?,
        })
    }
}

/// Appends rows to a CSV file, flushing after every batch.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    rows: u64,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(File::create(path)?);
        inner.write_record(HEADER)?;
        inner.flush()?;
        Ok(Self { inner, rows: 0 })
    }

    /// Reopens `path` keeping only its first `keep` data rows.
    pub fn resume(path: impl AsRef<Path>, keep: u64) -> Result<Self> {
        let path = path.as_ref();
        let mut lines = BufReader::new(File::open(path)?).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != HEADER.join(",") {
            return Err(Error::InvalidArgument(format!(
                "{}: not a metrics file",
                path.display()
            )));
        }
        let kept: Vec<String> = lines.take(keep as usize).collect::<std::io::Result<_>>()?;
        if kept.len() as u64 != keep {
            return Err(Error::Checkpoint(format!(
                "{} has {} rows but the checkpoint expects {keep}",
                path.display(),
                kept.len()
            )));
        }
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        kept.iter().try_for_each(|l| writeln!(f, "{l}"))?;
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
            rows: keep,
        })
    }

    pub fn write(&mut self, rows: &[MetricRow]) -> Result<()> {
        for r in rows {
            self.inner.write_record(r.fields())?;
        }
        self.inner.flush()?;
        self.rows += rows.len() as u64;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(HEADER) {
        return Err(Error::InvalidArgument("unexpected metrics header".into()));
    }
    r.records().map(|rec| MetricRow::parse(&rec?)).collect()
}
