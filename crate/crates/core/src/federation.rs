//! Client/server protocol for federated continual learning.
//!
//! A task is learned over `rounds_per_task` aggregation rounds. In each
//! round every client runs `local_iters` training iterations whose gradient
//! is integrated against restored past-task gradients, uploads its global
//! weights, receives the FedAvg aggregate, and fine-tunes for one epoch with
//! the post-aggregation gradient integrated against the last pre-upload
//! gradient. The output layer is local and never leaves the client.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{self, ConstraintSet, ConstraintSource, SolverConfig};
use crate::knowledge::{self, DistanceMetric, KnowledgeFill, KnowledgeStore};
use crate::metrics::{Event, IntegrationEvent, MetricsSink, Phase, ProtocolEvent};
use crate::nn::{self, Batch, MlpShape, ParamVector};
use crate::rng::{Purpose, StreamKey};
use crate::taskgen::ClientTaskData;

/// Bytes per transmitted weight.
pub const BYTES_PER_WEIGHT: u64 = 8;

/// Split of parameter indices into federated (global) and on-device (local) weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionMask {
    global_indices: Vec<usize>,
    local_indices: Vec<usize>,
}

impl PartitionMask {
    /// Output layer local, everything before it global.
    pub fn head_local(shape: &MlpShape) -> Self {
        let head = shape.head_range();
        PartitionMask { global_indices: (0..head.start).collect(), local_indices: head.collect() }
    }

    pub fn all_global(param_count: usize) -> Self {
        PartitionMask { global_indices: (0..param_count).collect(), local_indices: Vec::new() }
    }

    /// Mask from an explicit global index list.
    pub fn from_global(mut global_indices: Vec<usize>, param_count: usize) -> Result<Self> {
        global_indices.sort_unstable();
        global_indices.dedup();
        if global_indices.last().is_some_and(|&i| i >= param_count) {
            return Err(Error::dim("global index out of range"));
        }
        let mut is_global = vec![false; param_count];
        for &i in &global_indices {
            is_global[i] = true;
        }
        let local_indices = (0..param_count).filter(|&i| !is_global[i]).collect();
        Ok(PartitionMask { global_indices, local_indices })
    }

    pub fn global_indices(&self) -> &[usize] {
        &self.global_indices
    }

    pub fn local_indices(&self) -> &[usize] {
        &self.local_indices
    }

    pub fn param_count(&self) -> usize {
        self.global_indices.len() + self.local_indices.len()
    }

    pub fn gather(&self, params: &[f64]) -> Vec<f64> {
        self.global_indices.iter().map(|&i| params[i]).collect()
    }

    pub fn scatter(&self, params: &mut [f64], slice: &[f64]) -> Result<()> {
        if slice.len() != self.global_indices.len() {
            return Err(Error::protocol(format!(
                "global slice has {} entries, mask expects {}",
                slice.len(),
                self.global_indices.len()
            )));
        }
        for (&i, &v) in self.global_indices.iter().zip(slice) {
            params[i] = v;
        }
        Ok(())
    }

    /// Bytes of one transfer of the global weights.
    pub fn transfer_bytes(&self) -> u64 {
        BYTES_PER_WEIGHT * self.global_indices.len() as u64
    }
}

/// Learning-rate schedules satisfying the convergence constraints:
/// local rate decaying as `r^{-1/2}`, global rate `O(1/r)` and never above
/// `2 / (mu (gamma + r))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub eta_l0: f64,
    pub eta_g0: f64,
    pub mu: f64,
    pub big_l: f64,
    pub gamma: f64,
}

impl ScheduleConfig {
    /// `gamma = max(8 L / mu, rounds_per_task)`.
    pub fn new(eta_l0: f64, eta_g0: f64, mu: f64, big_l: f64, rounds_per_task: usize) -> Result<Self> {
        for (name, v) in [("eta_l0", eta_l0), ("eta_g0", eta_g0), ("mu", mu), ("big_l", big_l)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let gamma = (8.0 * big_l / mu).max(rounds_per_task as f64);
        let cfg = ScheduleConfig { eta_l0, eta_g0, mu, big_l, gamma };
        if eta_global(&cfg, 1) * mu * (gamma + 1.0) > 2.0 {
            return Err(Error::config("global learning rate violates its bound at r = 1"));
        }
        Ok(cfg)
    }
}

/// `eta_l0 / sqrt(r)` for `r >= 1`.
pub fn eta_local(cfg: &ScheduleConfig, r: usize) -> f64 {
    cfg.eta_l0 / (r.max(1) as f64).sqrt()
}

/// `min(eta_g0 / r, 2 / (mu (gamma + r)))` for `r >= 1`.
pub fn eta_global(cfg: &ScheduleConfig, r: usize) -> f64 {
    let r = r.max(1) as f64;
    (cfg.eta_g0 / r).min(2.0 / (cfg.mu * (cfg.gamma + r)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub rounds_per_task: usize,
    pub local_iters: usize,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
}

fn default_finetune_epochs() -> usize {
    1
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_per_task == 0 || self.local_iters == 0 || self.finetune_epochs == 0 {
            return Err(Error::config(format!("round plan entries must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// FedAvg weight `p_i` of one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientWeight(pub f64);

/// `p_i = n_i / sum_j n_j`.
pub fn sample_weights(counts: &[usize]) -> Result<Vec<ClientWeight>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::protocol("no samples to weight"));
    }
    Ok(counts.iter().map(|&n| ClientWeight(n as f64 / total as f64)).collect())
}

/// Which protocol hooks are active and how they are tuned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    /// Upload, aggregate, and fine-tune after each round.
    pub federated: bool,
    /// Integrate local gradients against restored past-task gradients.
    pub past_integration: bool,
    /// Integrate fine-tune gradients against the pre-upload gradient.
    pub post_integration: bool,
    pub distance: DistanceMetric,
    pub solver: SolverConfig,
    pub knowledge_fill: KnowledgeFill,
    /// Masked fine-tune steps applied to freshly extracted knowledge.
    pub knowledge_finetune_steps: usize,
    pub knowledge_lr: f64,
    pub batch_size: usize,
    /// Threshold for the `||g'||^2` diagnostic.
    pub lambda_bound: f64,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            federated: true,
            past_integration: true,
            post_integration: true,
            distance: DistanceMetric::Wasserstein,
            solver: SolverConfig::default(),
            knowledge_fill: KnowledgeFill::Zeros,
            knowledge_finetune_steps: 0,
            knowledge_lr: 0.01,
            batch_size: 32,
            lambda_bound: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub client_id: usize,
    pub seed: u64,
    pub shape: MlpShape,
    pub params: ParamVector,
    pub mask: PartitionMask,
    pub store: KnowledgeStore,
    /// Number of tasks finished so far.
    pub task_cursor: usize,
    pub rho: f64,
    pub k: usize,
}

impl ClientState {
    pub fn new(client_id: usize, seed: u64, shape: MlpShape, params: ParamVector, rho: f64, k: usize) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::dim("initial params do not match the shape"));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::config(format!("rho must be in (0, 1], got {rho}")));
        }
        if k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        let mask = PartitionMask::head_local(&shape);
        Ok(ClientState { client_id, seed, shape, params, mask, store: KnowledgeStore::new(), task_cursor: 0, rho, k })
    }
}

/// Result of one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Gradient actually applied (after integration).
    pub applied: ParamVector,
    pub event: IntegrationEvent,
}

/// One local training iteration on the current task.
///
/// With past knowledge present (and integration on) all stored tasks'
/// gradients are restored from `batch`'s inputs, the `k` most dissimilar
/// are kept as constraints, and the step uses the integrated gradient.
pub fn local_train_iteration(
    client: &mut ClientState,
    batch: &Batch,
    r_iter: usize,
    schedule: &ScheduleConfig,
    opts: &ProtocolOptions,
) -> Result<StepOutcome> {
    let grad = nn::grad_hard(&client.shape, &client.params, batch)?;
    let mut event = IntegrationEvent {
        task: client.task_cursor,
        round: 0,
        client: client.client_id,
        phase: Phase::Local,
        constraint_rows: 0,
        selected_tasks: Vec::new(),
        projected: false,
        fell_back: false,
        sq_norm: 0.0,
        bound_exceeded: false,
    };
    let applied = if opts.past_integration && !client.store.is_empty() {
        let mut restored = BTreeMap::new();
        for knowledge in client.store.iter() {
            let g = knowledge::restore_gradient(&client.shape, &client.params, knowledge, &batch.inputs)?;
            restored.insert(knowledge.task_id, g);
        }
        let selection = knowledge::select_signature_tasks(&client.store, &grad, &restored, client.k, opts.distance)?;
        let rows = selection.selected_task_ids.iter().map(|t| restored.remove(t).expect("restored above")).collect();
        let labels = selection.selected_task_ids.iter().map(|&t| ConstraintSource::Task(t)).collect();
        let set = ConstraintSet::new(rows, labels)?;
        let result = integrator::integrate(&set, &grad, &opts.solver)?;
        event.constraint_rows = set.len();
        event.selected_tasks = selection.selected_task_ids;
        event.projected = result.projected;
        event.fell_back = result.fell_back;
        result.gradient
    } else {
        grad
    };
    let bound = integrator::check_bounded(&applied, opts.lambda_bound);
    event.sq_norm = bound.sq_norm;
    event.bound_exceeded = bound.exceeded;
    client.params.descend(eta_local(schedule, r_iter), &applied);
    Ok(StepOutcome { applied, event })
}

/// The client's global weights, ready to send.
pub fn upload(client: &ClientState) -> Vec<f64> {
    client.mask.gather(&client.params)
}

/// One client's contribution to an aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub slice: Vec<f64>,
    pub weight: ClientWeight,
}

/// FedAvg: `sum_i p_i * slice_i`, summed in client-id order.
pub fn aggregate(uploads: &[Upload]) -> Result<Vec<f64>> {
    if uploads.is_empty() {
        return Err(Error::protocol("aggregation with zero participants"));
    }
    let len = uploads[0].slice.len();
    if uploads.iter().any(|u| u.slice.len() != len) {
        return Err(Error::protocol("uploaded slices differ in length"));
    }
    if uploads.iter().any(|u| !(u.weight.0 > 0.0 && u.weight.0 <= 1.0)) {
        return Err(Error::protocol("client weights must lie in (0, 1]"));
    }
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::protocol("duplicate client id in aggregation"));
    }
    let weight_sum: f64 = order.iter().map(|u| u.weight.0).sum();
    if (weight_sum - 1.0).abs() > 1e-12 {
        return Err(Error::protocol(format!("client weights sum to {weight_sum}, expected 1")));
    }
    let mut out = vec![0.0; len];
    for u in order {
        for (o, v) in out.iter_mut().zip(&u.slice) {
            *o += u.weight.0 * v;
        }
    }
    Ok(out)
}

/// Installs the aggregate and fine-tunes over `batches`, integrating every
/// post-aggregation gradient against the pre-upload gradient `g_before`.
pub fn finetune_after_aggregation(
    client: &mut ClientState,
    aggregated: &[f64],
    batches: &[Batch],
    round_idx: usize,
    g_before: &ParamVector,
    schedule: &ScheduleConfig,
    opts: &ProtocolOptions,
) -> Result<Vec<IntegrationEvent>> {
    client.mask.scatter(&mut client.params, aggregated)?;
    let lr = eta_global(schedule, round_idx);
    let mut events = Vec::with_capacity(batches.len());
    for batch in batches {
        let g_after = nn::grad_hard(&client.shape, &client.params, batch)?;
        let mut event = IntegrationEvent {
            task: client.task_cursor,
            round: round_idx,
            client: client.client_id,
            phase: Phase::Finetune,
            constraint_rows: 0,
            selected_tasks: Vec::new(),
            projected: false,
            fell_back: false,
            sq_norm: 0.0,
            bound_exceeded: false,
        };
        let applied = if opts.post_integration {
            let set = ConstraintSet::single(g_before.clone(), ConstraintSource::PreAggregation)?;
            let result = integrator::integrate(&set, &g_after, &opts.solver)?;
            event.constraint_rows = 1;
            event.projected = result.projected;
            event.fell_back = result.fell_back;
            result.gradient
        } else {
            g_after
        };
        let bound = integrator::check_bounded(&applied, opts.lambda_bound);
        event.sq_norm = bound.sq_norm;
        event.bound_exceeded = bound.exceeded;
        client.params.descend(lr, &applied);
        events.push(event);
    }
    Ok(events)
}

/// Deterministic mini-batch order for one client on one task.
#[derive(Debug, Clone, Copy)]
pub struct BatchSchedule {
    pub seed: u64,
    pub client: usize,
    pub task: usize,
    pub batch_size: usize,
    pub len: usize,
}

impl BatchSchedule {
    fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    fn permutation(&self, purpose: Purpose, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        let mut rng = StreamKey::new(self.seed, purpose).client(self.client).task(self.task).extra(epoch).rng();
        idx.shuffle(&mut rng);
        idx
    }

    /// Row indices of the `b`-th local mini-batch (0-based, cycling through
    /// freshly shuffled epochs).
    pub fn local_batch(&self, b: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let perm = self.permutation(Purpose::Shuffle, (b / per_epoch) as u64);
        let start = (b % per_epoch) * self.batch_size;
        perm[start..(start + self.batch_size).min(self.len)].to_vec()
    }

    /// Mini-batches covering every sample exactly once per epoch.
    pub fn finetune_batches(&self, round: usize, epochs: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for e in 0..epochs {
            let perm = self.permutation(Purpose::Finetune, (round * epochs + e) as u64);
            out.extend(perm.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        out
    }
}

/// Per-round state held by the simulated server.
#[derive(Debug, Clone, Default)]
pub struct Server {
    pub global: Option<Vec<f64>>,
    pub rounds_completed: usize,
}

/// Bytes exchanged by one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub task: usize,
    pub round: usize,
    pub client: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskFragment {
    pub traffic: Vec<RoundTraffic>,
    pub integration: Vec<IntegrationEvent>,
}

/// Runs all rounds of one task for every client, then extracts each
/// client's knowledge and advances its task cursor.
///
/// Clients run in parallel inside `pool`; aggregation is a barrier and
/// events are emitted in client order, so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    clients: &mut [ClientState],
    data: &[ClientTaskData],
    server: &mut Server,
    plan: &RoundPlan,
    schedule: &ScheduleConfig,
    opts: &ProtocolOptions,
    task_id: usize,
    pool: &rayon::ThreadPool,
    sink: &mut dyn MetricsSink,
) -> Result<TaskFragment> {
    plan.validate()?;
    if clients.is_empty() {
        return Err(Error::protocol("aggregation with zero participants"));
    }
    if clients.len() != data.len() {
        return Err(Error::protocol("one data set per client required"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    for (c, d) in clients.iter().zip(data) {
        if c.task_cursor != task_id || d.task_id != task_id {
            return Err(Error::protocol(format!(
                "client {} is at task {} with data for task {}, run requested task {task_id}",
                c.client_id, c.task_cursor, d.task_id
            )));
        }
    }

    let mut fragment = TaskFragment::default();
    let weights = sample_weights(&data.iter().map(ClientTaskData::train_len).collect::<Vec<_>>())?;

    for round in 0..plan.rounds_per_task {
        let round_idx = round + 1;
        let started = Instant::now();

        // Local phase.
        let local: Vec<Result<(Vec<IntegrationEvent>, Option<ParamVector>)>> = pool.install(|| {
            clients
                .par_iter_mut()
                .zip(data.par_iter())
                .map(|(client, d)| {
                    let sched = BatchSchedule {
                        seed: client.seed,
                        client: client.client_id,
                        task: task_id,
                        batch_size: opts.batch_size,
                        len: d.train_len(),
                    };
                    let mut events = Vec::with_capacity(plan.local_iters);
                    let mut last = None;
                    for it in 0..plan.local_iters {
                        let b = round * plan.local_iters + it;
                        let batch = d.train.select(&sched.local_batch(b));
                        let mut step = local_train_iteration(client, &batch, b + 1, schedule, opts)?;
                        step.event.round = round_idx;
                        events.push(step.event);
                        last = Some(step.applied);
                    }
                    Ok((events, last))
                })
                .collect()
        });
        let mut before = Vec::with_capacity(clients.len());
        for r in local {
            let (events, last) = r?;
            for e in events {
                sink.record(Event::Integration(e.clone()));
                fragment.integration.push(e);
            }
            before.push(last.expect("local_iters >= 1"));
        }

        if !opts.federated {
            continue;
        }

        // Upload and aggregate.
        let uploads: Vec<Upload> = clients
            .iter()
            .zip(&weights)
            .map(|(c, &w)| Upload { client_id: c.client_id, slice: upload(c), weight: w })
            .collect();
        let aggregated = aggregate(&uploads)?;
        server.global = Some(aggregated.clone());
        server.rounds_completed += 1;

        // Fine-tune phase.
        let tuned: Vec<Result<Vec<IntegrationEvent>>> = pool.install(|| {
            clients
                .par_iter_mut()
                .zip(data.par_iter())
                .zip(before.par_iter())
                .map(|((client, d), g_before)| {
                    let sched = BatchSchedule {
                        seed: client.seed,
                        client: client.client_id,
                        task: task_id,
                        batch_size: opts.batch_size,
                        len: d.train_len(),
                    };
                    let batches: Vec<Batch> = sched
                        .finetune_batches(round, plan.finetune_epochs)
                        .iter()
                        .map(|idx| d.train.select(idx))
                        .collect();
                    finetune_after_aggregation(client, &aggregated, &batches, round_idx, g_before, schedule, opts)
                })
                .collect()
        });
        let elapsed = started.elapsed().as_secs_f64();
        for (client, r) in clients.iter().zip(tuned) {
            for e in r? {
                sink.record(Event::Integration(e.clone()));
                fragment.integration.push(e);
            }
            let traffic = RoundTraffic {
                task: task_id,
                round: round_idx,
                client: client.client_id,
                bytes_up: client.mask.transfer_bytes(),
                bytes_down: client.mask.transfer_bytes(),
            };
            sink.record(Event::Protocol(ProtocolEvent {
                task: task_id,
                round: round_idx,
                client: client.client_id,
                bytes_up: traffic.bytes_up,
                bytes_down: traffic.bytes_down,
                wall_clock_seconds: elapsed,
            }));
            fragment.traffic.push(traffic);
        }
    }

    // Knowledge extraction at task end.
    let extracted: Vec<Result<()>> = pool
        .install(|| clients.par_iter_mut().zip(data.par_iter()).map(|(client, d)| end_task(client, d, opts)).collect());
    extracted.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(fragment)
}

/// Extracts (and optionally fine-tunes) the finished task's knowledge.
pub fn end_task(client: &mut ClientState, data: &ClientTaskData, opts: &ProtocolOptions) -> Result<()> {
    let task_id = client.task_cursor;
    let mut k = knowledge::extract_knowledge_with_fill(task_id, client.rho, &client.params, opts.knowledge_fill)?;
    if opts.knowledge_finetune_steps > 0 {
        k = knowledge::finetune_knowledge(
            &client.shape,
            &client.params,
            &k,
            &data.train,
            opts.knowledge_finetune_steps,
            opts.knowledge_lr,
        )?;
    }
    client.store.insert(k)?;
    client.task_cursor += 1;
    Ok(())
}
