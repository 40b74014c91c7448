//! Signature-task knowledge: extraction, restoration, and dissimilarity ranking.
//!
//! A task's knowledge is the top-ρ fraction of model weights by magnitude,
//! kept as sparse `(index, value)` pairs. A past task's gradient is restored
//! by treating the knowledge-only model's softmax outputs on the *current*
//! task's inputs as soft targets for the current model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Batch, LogitTargets, Matrix, MlpShape, ParamVector};

/// How weights outside a task's retained set are filled when the
/// knowledge is turned back into a dense model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeFill {
    /// Pruning semantics: non-retained weights are zero.
    #[default]
    Zeros,
    /// Non-retained weights keep the values they had at extraction time.
    Frozen,
}

/// Distance used to rank restored gradients against the current gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Wasserstein,
    Cosine,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            DistanceMetric::Wasserstein => wasserstein1d(a, b),
            DistanceMetric::Cosine => cosine_distance(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskKnowledge {
    pub task_id: usize,
    pub rho: f64,
    /// Length of the parameter vector the entries index into.
    pub param_count: usize,
    /// Strictly increasing indices with the retained values.
    pub entries: Vec<(usize, f64)>,
    /// Dense snapshot used for [`KnowledgeFill::Frozen`]; `None` for zero fill.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Vec<f64>>,
}

impl TaskKnowledge {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn fill(&self) -> KnowledgeFill {
        if self.background.is_some() {
            KnowledgeFill::Frozen
        } else {
            KnowledgeFill::Zeros
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.entries.len() != retained_count(self.rho, self.param_count) {
            return Err(Error::dim(format!(
                "task {} keeps {} entries, expected {}",
                self.task_id,
                self.entries.len(),
                retained_count(self.rho, self.param_count)
            )));
        }
        let increasing = self.entries.windows(2).all(|w| w[0].0 < w[1].0);
        let in_range = self.entries.last().is_none_or(|&(i, _)| i < self.param_count);
        if !increasing || !in_range {
            return Err(Error::dim(format!("task {} has unsorted or out-of-range indices", self.task_id)));
        }
        if self.entries.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::dim(format!("task {} has non-finite values", self.task_id)));
        }
        if let Some(bg) = &self.background {
            if bg.len() != self.param_count {
                return Err(Error::dim("background length differs from param_count"));
            }
        }
        Ok(())
    }
}

/// Number of weights retained for ratio `rho` out of `n`: `ceil(rho * n)`.
///
/// A small slack absorbs representation error in products like `0.1 * 1000`.
pub fn retained_count(rho: f64, n: usize) -> usize {
    let raw = (rho * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("rho must be in (0, 1], got {rho}")))
    }
}

/// Keeps the `ceil(rho * n)` weights with the largest magnitude.
///
/// Ties at the threshold go to the lower index.
pub fn extract_knowledge(task_id: usize, rho: f64, params: &ParamVector) -> Result<TaskKnowledge> {
    check_rho(rho)?;
    if !params.is_finite() {
        return Err(Error::dim("cannot extract knowledge from non-finite parameters"));
    }
    let n = params.len();
    let keep = retained_count(rho, n);
    let mut order: Vec<usize> = (0..n).collect();
    let by_magnitude = |&a: &usize, &b: &usize| params[b].abs().total_cmp(&params[a].abs()).then(a.cmp(&b));
    if keep < n {
        order.select_nth_unstable_by(keep, by_magnitude);
        order.truncate(keep);
    }
    order.sort_unstable();
    Ok(TaskKnowledge {
        task_id,
        rho,
        param_count: n,
        entries: order.into_iter().map(|i| (i, params[i])).collect(),
        background: None,
    })
}

/// Like [`extract_knowledge`], but the knowledge remembers the full vector so
/// [`materialize`] fills non-retained positions with their extraction-time values.
pub fn extract_knowledge_with_fill(
    task_id: usize,
    rho: f64,
    params: &ParamVector,
    fill: KnowledgeFill,
) -> Result<TaskKnowledge> {
    let mut k = extract_knowledge(task_id, rho, params)?;
    if fill == KnowledgeFill::Frozen {
        k.background = Some(params.to_vec());
    }
    Ok(k)
}

/// Dense model holding only the task's knowledge.
///
/// This is the only dense copy made from a knowledge record.
pub fn materialize(shape: &MlpShape, knowledge: &TaskKnowledge) -> Result<ParamVector> {
    if knowledge.param_count != shape.param_count() {
        return Err(Error::dim(format!(
            "knowledge for task {} indexes {} params, shape has {}",
            knowledge.task_id,
            knowledge.param_count,
            shape.param_count()
        )));
    }
    let mut dense = match &knowledge.background {
        Some(bg) => bg.clone(),
        None => vec![0.0; knowledge.param_count],
    };
    for &(i, v) in &knowledge.entries {
        dense[i] = v;
    }
    Ok(ParamVector(dense))
}

/// Retrains only the retained weights of the materialized model on `batch`.
///
/// Every step applies a gradient masked to the knowledge indices, so the
/// non-retained positions of the working model never move. `params` is the
/// caller's live model and is left untouched.
pub fn finetune_knowledge(
    shape: &MlpShape,
    params: &ParamVector,
    knowledge: &TaskKnowledge,
    batch: &Batch,
    steps: usize,
    lr: f64,
) -> Result<TaskKnowledge> {
    if params.len() != knowledge.param_count {
        return Err(Error::dim("params and knowledge disagree on length"));
    }
    if steps == 0 {
        return Ok(knowledge.clone());
    }
    let mut work = materialize(shape, knowledge)?;
    for _ in 0..steps {
        let grad = nn::grad_hard(shape, &work, batch)?;
        let update = masked_update(&grad, knowledge);
        work.descend(lr, &update);
    }
    let mut tuned = knowledge.clone();
    for entry in &mut tuned.entries {
        entry.1 = work[entry.0];
    }
    Ok(tuned)
}

/// Gradient restricted to the knowledge indices; zero elsewhere.
pub fn masked_update(grad: &[f64], knowledge: &TaskKnowledge) -> Vec<f64> {
    let mut out = vec![0.0; grad.len()];
    for i in knowledge.indices() {
        out[i] = grad[i];
    }
    out
}

/// Gradient that pulls the current model toward the past task's predictions
/// on the current task's inputs.
///
/// Only current-task inputs are accepted; no past samples exist to pass in.
pub fn restore_gradient(
    shape: &MlpShape,
    current_params: &ParamVector,
    knowledge: &TaskKnowledge,
    inputs: &Matrix,
) -> Result<ParamVector> {
    let past_model = materialize(shape, knowledge)?;
    let targets: LogitTargets = nn::forward(shape, &past_model, inputs)?;
    nn::grad_soft(shape, current_params, inputs, &targets)
}

/// 1-D Wasserstein-1 distance between the empirical distributions of the
/// components of `a` and `b`: mean of `|sort(a)_i - sort(b)_i|`.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("wasserstein1d on lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}

/// `1 - cos(a, b)`, with zero vectors treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine distance on lengths {} and {}", a.len(), b.len())));
    }
    let na = nn::dot(a, a).sqrt();
    let nb = nn::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - nn::dot(a, b) / (na * nb)).max(0.0))
}

/// Per-client store of learned tasks, keyed by contiguous task ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeStore {
    tasks: BTreeMap<usize, TaskKnowledge>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the next task. Ids must arrive as 0, 1, 2, ...
    pub fn insert(&mut self, knowledge: TaskKnowledge) -> Result<()> {
        if knowledge.task_id != self.tasks.len() {
            return Err(Error::protocol(format!(
                "knowledge for task {} arrived but the store expects task {}",
                knowledge.task_id,
                self.tasks.len()
            )));
        }
        knowledge.validate()?;
        self.tasks.insert(knowledge.task_id, knowledge);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: usize) -> Option<&TaskKnowledge> {
        self.tasks.get(&task_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskKnowledge> {
        self.tasks.values()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    /// Total number of stored `(index, value)` pairs.
    pub fn total_entries(&self) -> usize {
        self.tasks.values().map(TaskKnowledge::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureSelection {
    pub k: usize,
    /// Selected task ids, farthest first.
    pub selected_task_ids: Vec<usize>,
    pub distances: BTreeMap<usize, f64>,
}

/// Picks the `k` restored gradients farthest from `current_grad`.
///
/// Ties on distance go to the lower task id.
pub fn select_signature_tasks(
    store: &KnowledgeStore,
    current_grad: &[f64],
    restored_grads: &BTreeMap<usize, ParamVector>,
    k: usize,
    metric: DistanceMetric,
) -> Result<SignatureSelection> {
    if k < 1 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut distances = BTreeMap::new();
    for task_id in store.task_ids() {
        let grad = restored_grads
            .get(&task_id)
            .ok_or_else(|| Error::protocol(format!("no restored gradient for task {task_id}")))?;
        distances.insert(task_id, metric.distance(grad, current_grad)?);
    }
    let selected_task_ids = top_k_by_distance(&distances, k);
    Ok(SignatureSelection { k, selected_task_ids, distances })
}

/// Ids of the `k` largest distances, largest first, lower id on ties.
pub fn top_k_by_distance(distances: &BTreeMap<usize, f64>, k: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = distances.iter().map(|(&t, &d)| (t, d)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(t, _)| t).collect()
}
