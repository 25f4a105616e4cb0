//! Per-step training log in CSV form.
//!
//! Header: `step,epoch,l_rec,l_rot,l_con,w1,w2,w3,total,lr,ms`. Disabled
//! tasks log a loss and weight of 0. `ms` is wall-clock time of the step and
//! is the only column that varies between identical runs.

use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: [&str; 11] = ["step", "epoch", "l_rec", "l_rot", "l_con", "w1", "w2", "w3", "total", "lr", "ms"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub losses: [f64; 3],
    pub weights: [f64; 3],
    pub total: f64,
    pub lr: f64,
    pub ms: f64,
}

impl MetricsRow {
    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string(), self.epoch.to_string()];
        f.extend(self.losses.iter().map(|v| v.to_string()));
        f.extend(self.weights.iter().map(|v| v.to_string()));
        f.push(self.total.to_string());
        f.push(self.lr.to_string());
        f.push(format!("{:.3}", self.ms));
        f
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

/// Appends rows to a metrics file, writing the header only to a new file.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let existing = path.exists() && std::fs::metadata(path)?.len() > 0;
        let last_step = if existing {
            read_metrics(path)?.last().map(|r| r.step)
        } else {
            None
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !existing {
            inner.write_record(HEADER).map_err(csv_err)?;
            inner.flush()?;
        }
        Ok(Self { inner, last_step })
    }

    /// Steps must strictly increase across appends.
    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(last) = self.last_step {
            if row.step <= last {
                return Err(Error::Contract(format!("metrics step {} after step {last}", row.step)));
            }
        }
        self.inner.write_record(row.fields()).map_err(csv_err)?;
        self.inner.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad metrics value {:?}", &rec[i])))
        };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse::<u64>()
                .map_err(|_| Error::Format(format!("bad metrics value {:?}", &rec[i])))
        };
        rows.push(MetricsRow {
            step: int(0)?,
            epoch: int(1)?,
            losses: [num(2)?, num(3)?, num(4)?],
            weights: [num(5)?, num(6)?, num(7)?],
            total: num(8)?,
            lr: num(9)?,
            ms: num(10)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            epoch: 0,
            losses: [0.25, 1.3862943611198906, 0.0],
            weights: [1.0, 0.1, 0.0],
            total: 0.3886,
            lr: 5e-4,
            ms: 12.5,
        }
    }

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::open(&p).unwrap();
        w.append(&row(1)).unwrap();
        w.append(&row(2)).unwrap();
        assert!(w.append(&row(2)).is_err());
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,epoch,l_rec,l_rot,l_con,w1,w2,w3,total,lr,ms\n"));
        let mut w = MetricsWriter::open(&p).unwrap();
        assert!(w.append(&row(1)).is_err());
        w.append(&row(3)).unwrap();
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], row(3));
    }
}
