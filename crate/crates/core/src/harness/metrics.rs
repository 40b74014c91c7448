//! Accuracy, forgetting, and communication accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundTraffic;

/// `acc[j][i]`: accuracy on task `i` after finishing task `j` (`i <= j`),
/// averaged over clients. Stored as a ragged lower-triangular matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    /// Builds the matrix from raw accuracies `raw[j][client][i]`.
    pub fn from_client_accuracies(raw: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut rows = Vec::with_capacity(raw.len());
        for (j, per_client) in raw.iter().enumerate() {
            if per_client.is_empty() {
                return Err(Error::protocol(format!("no client accuracies after task {j}")));
            }
            let mut row = vec![0.0; j + 1];
            for accs in per_client {
                if accs.len() != j + 1 {
                    return Err(Error::dim(format!("row {j} needs {} accuracies, got {}", j + 1, accs.len())));
                }
                for (r, a) in row.iter_mut().zip(accs) {
                    *r += a;
                }
            }
            row.iter_mut().for_each(|r| *r /= per_client.len() as f64);
            rows.push(row);
        }
        Ok(AccuracyMatrix { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }
}

/// `max(0, (acc[k][k] - acc[m][k]) / acc[k][k])`, clamped to `[0, 1]`.
///
/// `None` when `acc[k][k] == 0` or the entries do not exist.
pub fn forgetting_rate(acc: &AccuracyMatrix, task: usize, after: usize) -> Option<f64> {
    if task > after {
        return None;
    }
    let first = acc.get(task, task)?;
    let later = acc.get(after, task)?;
    if first <= 0.0 {
        return None;
    }
    Some(((first - later) / first).clamp(0.0, 1.0))
}

/// Mean forgetting over tasks `0..after` measured after task `after`.
///
/// Undefined entries are skipped; `None` if nothing is defined.
pub fn mean_forgetting(acc: &AccuracyMatrix, after: usize) -> Option<f64> {
    let rates: Vec<f64> = (0..after).filter_map(|k| forgetting_rate(acc, k, after)).collect();
    if rates.is_empty() {
        None
    } else {
        Some(rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

/// Mean of `acc[after][0..=after]`.
pub fn avg_accuracy(acc: &AccuracyMatrix, after: usize) -> Option<f64> {
    let row = acc.rows.get(after)?;
    Some(row.iter().sum::<f64>() / row.len() as f64)
}

/// Per-(round, client) traffic with derived totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub records: Vec<RoundTraffic>,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
}

impl CommLedger {
    pub fn push(&mut self, t: RoundTraffic) {
        self.total_bytes_up += t.bytes_up;
        self.total_bytes_down += t.bytes_down;
        self.records.push(t);
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes_up + self.total_bytes_down
    }

    /// Bytes moved during tasks `0..=task`.
    pub fn bytes_through_task(&self, task: usize) -> u64 {
        self.records.iter().filter(|r| r.task <= task).map(|r| r.bytes_up + r.bytes_down).sum()
    }

    /// Synchronous-round time: each client's transfers are serialized on its
    /// own link and a round lasts as long as its slowest client.
    pub fn round_seconds(&self, bandwidth: f64) -> f64 {
        let mut rounds: std::collections::BTreeMap<(usize, usize), u64> = Default::default();
        for r in &self.records {
            let slot = rounds.entry((r.task, r.round)).or_default();
            *slot = (*slot).max(r.bytes_up + r.bytes_down);
        }
        rounds.values().map(|&b| b as f64 / bandwidth).sum()
    }

    /// Totals recomputed from the records match the stored totals.
    pub fn is_consistent(&self) -> bool {
        let up: u64 = self.records.iter().map(|r| r.bytes_up).sum();
        let down: u64 = self.records.iter().map(|r| r.bytes_down).sum();
        up == self.total_bytes_up && down == self.total_bytes_down
    }
}

/// Total bytes over a single link of `bandwidth` bytes per second.
pub fn comm_time(ledger: &CommLedger, bandwidth: f64) -> Result<f64> {
    bytes_time(ledger.total_bytes(), bandwidth)
}

pub fn bytes_time(bytes: u64, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::config(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    Ok(bytes as f64 / bandwidth)
}
