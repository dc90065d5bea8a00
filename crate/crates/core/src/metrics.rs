//! Continual-learning scoreboard.
//!
//! `A[i][j]` is the accuracy (percent) on task `j`'s test set after training
//! task `i`, for `j <= i`.
//!
//! ```text
//! FAA = mean_j A[T-1][j]
//! CAA = mean_i mean_{j<=i} A[i][j]
//! AF  = mean_{j<=T-2} ( max_{j<=i<T-1} A[i][j] - A[T-1][j] )
//! ```
//!
//! Negative forgetting is reported as is.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends row `i`, which must hold exactly `i + 1` accuracies.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if row.len() != i + 1 {
            return Err(contract(format!(
                "row {i} needs {} entries, got {}",
                i + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=100.0).contains(*a)) {
            return Err(Error::Numeric(format!("accuracy {bad} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i)?.get(j).copied()
    }

    /// The leading `t x t` block.
    pub fn truncated(&self, t: usize) -> Self {
        Self {
            rows: self.rows[..t.min(self.rows.len())].to_vec(),
        }
    }

    fn non_empty(&self) -> Result<usize> {
        match self.rows.len() {
            0 => Err(contract("accuracy matrix is empty")),
            t => Ok(t),
        }
    }
}

/// Final average accuracy.
pub fn faa(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.non_empty()?;
    Ok(a.rows[t - 1].iter().sum::<f64>() / t as f64)
}

/// Continual average accuracy.
pub fn caa(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.non_empty()?;
    let stages: f64 = a
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().sum::<f64>() / (i + 1) as f64)
        .sum();
    Ok(stages / t as f64)
}

/// Average forgetting; undefined for fewer than two tasks.
pub fn af(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.rows.len();
    if t < 2 {
        return Err(contract(format!(
            "forgetting needs at least 2 tasks, have {t}"
        )));
    }
    let last = &a.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t - 1)
                .map(|i| a.rows[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Percentage of matching entries.
pub fn accuracy_percent(predicted: &[u32], labels: &[u32]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(contract("accuracy over an empty test set"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub task: usize,
    pub faa: f64,
    pub caa: f64,
    pub af: Option<f64>,
}

/// One row per completed task, each scored on the matrix so far.
pub fn metric_rows(a: &AccuracyMatrix) -> Result<Vec<MetricRow>> {
    (1..=a.num_tasks())
        .map(|t| {
            let sub = a.truncated(t);
            Ok(MetricRow {
                task: t - 1,
                faa: faa(&sub)?,
                caa: caa(&sub)?,
                af: if t >= 2 { Some(af(&sub)?) } else { None },
            })
        })
        .collect()
}

pub const CSV_HEADER: &str = "task,faa,caa,af";

/// `task,faa,caa,af` with AF blank on the first row.
pub fn to_csv(a: &AccuracyMatrix) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in metric_rows(a)? {
        let af = r.af.map(|v| format!("{v:.4}")).unwrap_or_default();
        writeln!(out, "{},{:.4},{:.4},{}", r.task, r.faa, r.caa, af).expect("string write");
    }
    Ok(out)
}

/// Raw predictions on one test set, recorded during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLog {
    /// Training stage `i`.
    pub after_task: usize,
    /// Evaluated task `j`.
    pub task: usize,
    pub predicted: Vec<u32>,
    pub labels: Vec<u32>,
}

/// Rebuilds the accuracy matrix from logs, one per `(i, j)` cell.
pub fn matrix_from_logs(logs: &[PredictionLog]) -> Result<AccuracyMatrix> {
    let t = logs.iter().map(|l| l.after_task + 1).max().unwrap_or(0);
    let mut m = AccuracyMatrix::new();
    for i in 0..t {
        let row = (0..=i)
            .map(|j| {
                let mut cell = logs.iter().filter(|l| l.after_task == i && l.task == j);
                match (cell.next(), cell.next()) {
                    (Some(l), None) => accuracy_percent(&l.predicted, &l.labels),
                    (None, _) => Err(contract(format!("no predictions for cell ({i}, {j})"))),
                    _ => Err(contract(format!(
                        "duplicate predictions for cell ({i}, {j})"
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        m.push_row(row)?;
    }
    Ok(m)
}
