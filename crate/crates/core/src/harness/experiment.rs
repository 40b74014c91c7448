//! End-to-end experiment runs and their reports.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{self, ClientState, Server};
use crate::harness::checkpoint::{Checkpoint, Progress};
use crate::harness::config::{ExperimentConfig, Strategy};
use crate::harness::metrics::{self, AccuracyMatrix, CommLedger};
use crate::metrics::{IntegrationEvent, MetricsSink, NullSink, Phase};
use crate::nn;
use crate::rng::{Purpose, StreamKey};
use crate::taskgen::{self, ClientTaskData};

/// Version of the report layout.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Env var capping worker threads.
pub const THREADS_ENV: &str = "FEDCL_THREADS";

/// Counters over every integration event of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSummary {
    pub local_steps: u64,
    pub finetune_steps: u64,
    pub local_projections: u64,
    pub finetune_projections: u64,
    /// Non-converged solves that fell back to the raw gradient.
    pub fallbacks: u64,
    pub constraint_rows: u64,
    /// Steps whose `||g'||^2` exceeded the configured bound.
    pub bound_exceeded: u64,
    pub max_sq_norm: f64,
}

impl IntegrationSummary {
    pub fn absorb(&mut self, e: &IntegrationEvent) {
        match e.phase {
            Phase::Local => {
                self.local_steps += 1;
                self.local_projections += u64::from(e.projected);
            }
            Phase::Finetune => {
                self.finetune_steps += 1;
                self.finetune_projections += u64::from(e.projected);
            }
        }
        self.fallbacks += u64::from(e.fell_back);
        self.constraint_rows += e.constraint_rows as u64;
        self.bound_exceeded += u64::from(e.bound_exceeded);
        self.max_sq_norm = self.max_sq_norm.max(e.sq_norm);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub ledger: CommLedger,
    pub total_bytes: u64,
    /// Total bytes over one link at the configured bandwidth.
    pub comm_seconds: f64,
    /// Sum over synchronous rounds of the slowest client's transfer time.
    pub round_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataAudit {
    /// Mean pairwise Jaccard similarity of client class sets, per task.
    pub mean_jaccard: Vec<f64>,
    /// Training samples per task summed over clients.
    pub train_samples: Vec<usize>,
    /// Training only ever touched training-split samples.
    pub train_split_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub accuracy: AccuracyMatrix,
    /// Raw `acc[j][client][i]`.
    pub client_accuracy: Vec<Vec<Vec<f64>>>,
    /// Average accuracy over learned tasks after each task.
    pub avg_accuracy: Vec<f64>,
    /// Forgetting of each earlier task after the final task.
    pub forgetting: Vec<Option<f64>>,
    /// Mean forgetting over earlier tasks after each task.
    pub mean_forgetting: Vec<Option<f64>>,
    pub comm: CommSummary,
    pub integration: IntegrationSummary,
    pub data: DataAudit,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    fn derive(
        config: &ExperimentConfig,
        client_accuracy: Vec<Vec<Vec<f64>>>,
        ledger: CommLedger,
        integration: IntegrationSummary,
        data: DataAudit,
        wall_clock_seconds: f64,
    ) -> Result<Self> {
        let accuracy = AccuracyMatrix::from_client_accuracies(&client_accuracy)?;
        let tasks = accuracy.tasks();
        let avg_accuracy = (0..tasks).map(|j| metrics::avg_accuracy(&accuracy, j).expect("row exists")).collect();
        let last = tasks.saturating_sub(1);
        let forgetting = (0..last).map(|k| metrics::forgetting_rate(&accuracy, k, last)).collect();
        let mean_forgetting = (0..tasks).map(|j| metrics::mean_forgetting(&accuracy, j)).collect();
        let bandwidth = config.bandwidth_bytes_per_sec;
        let comm = CommSummary {
            total_bytes: ledger.total_bytes(),
            comm_seconds: metrics::comm_time(&ledger, bandwidth)?,
            round_seconds: ledger.round_seconds(bandwidth),
            ledger,
        };
        Ok(RunReport {
            format_version: REPORT_FORMAT_VERSION,
            strategy: config.strategy,
            seed: config.seed,
            config: config.clone(),
            accuracy,
            client_accuracy,
            avg_accuracy,
            forgetting,
            mean_forgetting,
            comm,
            integration,
            data,
            wall_clock_seconds,
        })
    }

    pub fn final_avg_accuracy(&self) -> f64 {
        self.avg_accuracy.last().copied().unwrap_or(0.0)
    }

    pub fn final_mean_forgetting(&self) -> Option<f64> {
        self.mean_forgetting.last().copied().flatten()
    }

    /// Recomputes every derived field from the raw records and compares exactly.
    pub fn is_consistent(&self) -> bool {
        match RunReport::derive(
            &self.config,
            self.client_accuracy.clone(),
            self.comm.ledger.clone(),
            self.integration.clone(),
            self.data.clone(),
            self.wall_clock_seconds,
        ) {
            Ok(again) => again == *self && self.comm.ledger.is_consistent(),
            Err(_) => false,
        }
    }

    /// JSON with wall-clock fields zeroed, for byte-level comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.wall_clock_seconds = 0.0;
        Ok(serde_json::to_string_pretty(&copy)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Thread pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Everything generated from the seed before training starts.
pub struct Prepared {
    pub clients: Vec<ClientState>,
    /// `data[task][client]`
    pub data: Vec<Vec<ClientTaskData>>,
    pub audit: DataAudit,
}

/// Builds the task stream, allocation, client data, and initial client states.
///
/// Every client starts from the same seeded initialization.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let stream = taskgen::make_stream(cfg.seed, &cfg.stream)?;
    let allocations = taskgen::allocate_clients(cfg.seed, &stream, cfg.num_clients)?;
    let mut data = Vec::with_capacity(stream.len());
    for task in &stream {
        let per_client = allocations
            .iter()
            .map(|a| taskgen::sample_batches(&a.tasks[task.task_id], task, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        data.push(per_client);
    }
    let train_split_only = data.iter().zip(&stream).all(|(per_client, task)| {
        per_client.iter().all(|d| d.train_ids.iter().all(|id| id.index < task.train_count()))
    });
    let audit = DataAudit {
        mean_jaccard: (0..stream.len()).map(|t| taskgen::mean_jaccard(&allocations, t)).collect(),
        train_samples: data.iter().map(|pc| pc.iter().map(ClientTaskData::train_len).sum()).collect(),
        train_split_only,
    };
    let init = cfg.model.init_params(&mut StreamKey::new(cfg.seed, Purpose::Init).rng());
    let clients = (0..cfg.num_clients)
        .map(|id| ClientState::new(id, cfg.seed, cfg.model.clone(), init.clone(), cfg.rho, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { clients, data, audit })
}

/// Runs one experiment from scratch.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with(cfg, &mut NullSink, None, None)
}

/// Runs an experiment, streaming events to `sink`.
///
/// With `resume`, training continues after the checkpoint's last finished
/// task. With `checkpoint_dir`, a checkpoint is written after every task.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    sink: &mut dyn MetricsSink,
    resume: Option<Checkpoint>,
    checkpoint_dir: Option<&Path>,
) -> Result<RunReport> {
    let started = Instant::now();
    let Prepared { mut clients, data, audit } = prepare(cfg)?;
    let schedule = cfg.schedule()?;
    let opts = cfg.protocol_options();
    let pool = thread_pool()?;

    let mut progress = Progress::default();
    let mut first_task = 0;
    if let Some(ck) = resume {
        ck.check_matches(cfg)?;
        first_task = ck.completed_tasks;
        clients = ck.clients;
        progress = ck.progress;
    }

    let mut server = Server::default();
    for task_id in first_task..data.len() {
        let fragment = federation::run_task(
            &mut clients,
            &data[task_id],
            &mut server,
            &cfg.plan,
            &schedule,
            &opts,
            task_id,
            &pool,
            &mut *sink,
        )?;
        for t in fragment.traffic {
            progress.ledger.push(t);
        }
        for e in &fragment.integration {
            progress.integration.absorb(e);
        }
        progress.client_accuracy.push(evaluate(&clients, &data[..=task_id])?);
        if let Some(dir) = checkpoint_dir {
            let ck = Checkpoint::new(cfg, task_id + 1, clients.clone(), progress.clone())?;
            ck.write(&dir.join(format!("checkpoint_task{task_id:03}.bin")))?;
        }
    }

    RunReport::derive(
        cfg,
        progress.client_accuracy,
        progress.ledger,
        progress.integration,
        audit,
        started.elapsed().as_secs_f64(),
    )
}

/// `acc[client][i]` on the test sets of tasks `0..data.len()`.
fn evaluate(clients: &[ClientState], data: &[Vec<ClientTaskData>]) -> Result<Vec<Vec<f64>>> {
    clients
        .iter()
        .enumerate()
        .map(|(c, client)| {
            data.iter().map(|per_client| nn::accuracy(&client.shape, &client.params, &per_client[c].test)).collect()
        })
        .collect()
}
