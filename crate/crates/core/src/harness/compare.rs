//! Side-by-side runs emitted as CSV.
//!
//! Schema (UTF-8, LF line endings), one row per task index per run:
//!
//! ```text
//! strategy,seed,task_idx,avg_acc,mean_forgetting,bytes_total,sim_comm_seconds
//! ```
//!
//! `mean_forgetting` is empty for the first task. `bytes_total` and
//! `sim_comm_seconds` are cumulative through `task_idx`. A failed run
//! contributes a single row with `task_idx = failed` and empty metrics.

use rayon::prelude::*;

use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Strategy};
use crate::harness::experiment::{run_experiment, thread_pool, RunReport};
use crate::harness::metrics;

pub const CSV_HEADER: &str = "strategy,seed,task_idx,avg_acc,mean_forgetting,bytes_total,sim_comm_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub seed: u64,
    /// `None` marks a failed run.
    pub task_idx: Option<usize>,
    pub avg_acc: Option<f64>,
    pub mean_forgetting: Option<f64>,
    pub bytes_total: Option<u64>,
    pub sim_comm_seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let task = r.task_idx.map_or_else(|| "failed".to_string(), |t| t.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.strategy,
                r.seed,
                task,
                opt(r.avg_acc),
                opt(r.mean_forgetting),
                opt(r.bytes_total),
                opt(r.sim_comm_seconds)
            ));
        }
        out
    }
}

/// Table rows for one finished run.
pub fn report_rows(report: &RunReport) -> Vec<ComparisonRow> {
    let bandwidth = report.config.bandwidth_bytes_per_sec;
    (0..report.avg_accuracy.len())
        .map(|j| {
            let bytes = report.comm.ledger.bytes_through_task(j);
            ComparisonRow {
                strategy: report.strategy,
                seed: report.seed,
                task_idx: Some(j),
                avg_acc: Some(report.avg_accuracy[j]),
                mean_forgetting: report.mean_forgetting[j],
                bytes_total: Some(bytes),
                sim_comm_seconds: metrics::bytes_time(bytes, bandwidth).ok(),
            }
        })
        .collect()
}

/// Runs every config (in parallel) and tabulates them in input order.
///
/// A failing run is logged and marked; the others still complete.
pub fn compare(cfgs: &[ExperimentConfig]) -> Result<(ComparisonTable, Vec<Result<RunReport>>)> {
    let pool = thread_pool()?;
    let reports: Vec<Result<RunReport>> = pool.install(|| cfgs.par_iter().map(run_experiment).collect());
    let mut table = ComparisonTable::default();
    for (cfg, report) in cfgs.iter().zip(&reports) {
        match report {
            Ok(r) => table.rows.extend(report_rows(r)),
            Err(e) => {
                log::error!("run {} seed {} failed: {e}", cfg.strategy, cfg.seed);
                table.rows.push(ComparisonRow {
                    strategy: cfg.strategy,
                    seed: cfg.seed,
                    task_idx: None,
                    avg_acc: None,
                    mean_forgetting: None,
                    bytes_total: None,
                    sim_comm_seconds: None,
                });
            }
        }
    }
    Ok((table, reports))
}
