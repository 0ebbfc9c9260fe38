use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};
use crate::objectives::LossBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_fwd: f64,
    pub l_inv: f64,
    pub l_mask_inv: f64,
    pub total: f64,
    pub lr: f64,
}

/// Evaluation taken after `epoch` completed finetuning epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub mean_return: f64,
    pub normalized_mean: f64,
}

/// Append-only per-step training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    rows: Vec<LogRow>,
    evals: Vec<EvalSnapshot>,
}

impl RunLog {
    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn evals(&self) -> &[EvalSnapshot] {
        &self.evals
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(CtError::Config(format!("log step {} after {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_losses(&mut self, step: usize, epoch: usize, b: &LossBreakdown, lr: f64) -> Result<()> {
        self.push(LogRow {
            step,
            epoch,
            l_fwd: b.l_fwd,
            l_inv: b.l_inv,
            l_mask_inv: b.l_mask_inv,
            total: b.total,
            lr,
        })
    }

    pub fn push_eval(&mut self, snap: EvalSnapshot) {
        self.evals.push(snap);
    }

    /// Mean `total` over the rows of one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_evals_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.evals)
    }
}

pub fn read_evals_csv(path: &Path) -> Result<Vec<EvalSnapshot>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> CtError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CtError::storage(path, io),
        other => CtError::Integrity(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let to_err = |e| csv_err(path, e);
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| CtError::storage(path, e))
}
