//! Seeded synthetic continual-task streams with non-IID client allocation.
//!
//! Each task is a set of Gaussian class clusters. Every sample is addressed
//! by `(task, class, index)` and generated from its own random stream, so
//! any subset of samples can be produced independently and reproducibly.
//! For each class, indices `0..train_count` form the training split and the
//! remaining indices form the test split.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::rng::{Purpose, StreamKey};

/// Radius of the sphere class centroids are drawn on.
pub const CENTROID_RADIUS: f64 = 3.0;
/// Fraction of each class's samples used for training.
pub const TRAIN_FRACTION: f64 = 0.8;
pub const MIN_CLASSES_PER_CLIENT: usize = 2;
pub const MAX_CLASSES_PER_CLIENT: usize = 5;
pub const MIN_SAMPLE_FRACTION: f64 = 0.05;
pub const MAX_SAMPLE_FRACTION: f64 = 0.10;
/// Allocation redraws attempted per task before giving up on coverage.
pub const MAX_ALLOCATION_RETRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub samples_per_class: usize,
}

impl StreamParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.input_dim == 0 {
            return Err(Error::config("num_tasks, classes_per_task and input_dim must be >= 1"));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::config(format!("spread must be > 0, got {}", self.spread)));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config("samples_per_class must be >= 2 (one train, one test)"));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        train_count(self.samples_per_class)
    }
}

/// Training samples per class; at least one sample is left for testing.
pub fn train_count(samples_per_class: usize) -> usize {
    let t = (samples_per_class as f64 * TRAIN_FRACTION).round() as usize;
    t.clamp(1, samples_per_class - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Global class ids; position in this list is the within-task label.
    pub class_ids: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub spread: f64,
    pub samples_per_class: usize,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn input_dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn train_count(&self) -> usize {
        train_count(self.samples_per_class)
    }

    /// Features of sample `index` of within-task class `class`.
    pub fn sample(&self, seed: u64, class: usize, index: usize) -> Vec<f64> {
        let mut rng =
            StreamKey::new(seed, Purpose::Sample).task(self.task_id).extra(((class as u64) << 32) | index as u64).rng();
        self.means[class]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + self.spread * z
            })
            .collect()
    }
}

/// Generates `num_tasks` tasks with disjoint global class ids.
pub fn make_stream(seed: u64, params: &StreamParams) -> Result<Vec<TaskSpec>> {
    params.validate()?;
    let cpt = params.classes_per_task;
    Ok((0..params.num_tasks)
        .map(|task_id| {
            let mut rng = StreamKey::new(seed, Purpose::Centroids).task(task_id).rng();
            let means = (0..cpt)
                .map(|_| {
                    let mut v: Vec<f64> = (0..params.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    // A zero draw is measure-zero; fall back to the first axis.
                    if norm == 0.0 {
                        v[0] = 1.0;
                    } else {
                        v.iter_mut().for_each(|x| *x /= norm);
                    }
                    v.iter_mut().for_each(|x| *x *= CENTROID_RADIUS);
                    v
                })
                .collect();
            TaskSpec {
                task_id,
                class_ids: (task_id * cpt..(task_id + 1) * cpt).collect(),
                means,
                spread: params.spread,
                samples_per_class: params.samples_per_class,
            }
        })
        .collect())
}

/// One client's share of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    /// Within-task class label.
    pub class: usize,
    /// Training-split sample indices, disjoint from every other client's.
    pub train_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAllocation {
    pub task_id: usize,
    pub fraction: f64,
    pub shares: Vec<ClassShare>,
}

impl TaskAllocation {
    pub fn classes(&self) -> Vec<usize> {
        self.shares.iter().map(|s| s.class).collect()
    }

    pub fn train_len(&self) -> usize {
        self.shares.iter().map(|s| s.train_indices.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAllocation {
    pub client_id: usize,
    pub tasks: Vec<TaskAllocation>,
}

/// Gives every client a random 2..=5 class subset of every task and a 5-10%
/// slice of each allocated class's training samples.
///
/// Draws for a task are repeated until every class is held by some client
/// and no class is oversubscribed.
pub fn allocate_clients(seed: u64, stream: &[TaskSpec], num_clients: usize) -> Result<Vec<ClientAllocation>> {
    if num_clients == 0 {
        return Err(Error::config("num_clients must be >= 1"));
    }
    let mut clients: Vec<ClientAllocation> =
        (0..num_clients).map(|client_id| ClientAllocation { client_id, tasks: Vec::new() }).collect();

    for task in stream {
        let cpt = task.num_classes();
        if cpt < MIN_CLASSES_PER_CLIENT {
            return Err(Error::config(format!("classes_per_task must be >= {MIN_CLASSES_PER_CLIENT}")));
        }
        let max_classes = MAX_CLASSES_PER_CLIENT.min(cpt);
        if num_clients * max_classes < cpt {
            return Err(Error::config(format!(
                "{num_clients} clients holding at most {max_classes} classes each cannot cover {cpt} classes"
            )));
        }
        let train = task.train_count();
        let mut rng = StreamKey::new(seed, Purpose::Allocation).task(task.task_id).rng();
        let mut attempt = 0;
        let draws = loop {
            if attempt == MAX_ALLOCATION_RETRIES {
                return Err(Error::config(format!(
                    "could not allocate task {} to {num_clients} clients after {attempt} draws",
                    task.task_id
                )));
            }
            attempt += 1;
            let draws: Vec<(Vec<usize>, f64, usize)> = (0..num_clients)
                .map(|_| {
                    let size = rng.random_range(MIN_CLASSES_PER_CLIENT..=max_classes);
                    let mut classes: Vec<usize> = (0..cpt).collect();
                    classes.shuffle(&mut rng);
                    classes.truncate(size);
                    classes.sort_unstable();
                    let fraction = rng.random_range(MIN_SAMPLE_FRACTION..=MAX_SAMPLE_FRACTION);
                    let per_class = ((fraction * train as f64).round() as usize).max(1);
                    (classes, fraction, per_class)
                })
                .collect();
            let mut demand = vec![0usize; cpt];
            let mut covered = vec![false; cpt];
            for (classes, _, per_class) in &draws {
                for &c in classes {
                    demand[c] += per_class;
                    covered[c] = true;
                }
            }
            if covered.iter().all(|&c| c) && demand.iter().all(|&d| d <= train) {
                break draws;
            }
        };

        // Hand out consecutive chunks of a per-class permutation of the training split.
        let mut cursors = vec![0usize; cpt];
        let pools: Vec<Vec<usize>> = (0..cpt)
            .map(|c| {
                let mut pool: Vec<usize> = (0..train).collect();
                let mut prng = StreamKey::new(seed, Purpose::SplitPermutation).task(task.task_id).extra(c as u64).rng();
                pool.shuffle(&mut prng);
                pool
            })
            .collect();
        for (client, (classes, fraction, per_class)) in clients.iter_mut().zip(draws) {
            let shares = classes
                .into_iter()
                .map(|c| {
                    let start = cursors[c];
                    cursors[c] += per_class;
                    let mut train_indices = pools[c][start..start + per_class].to_vec();
                    train_indices.sort_unstable();
                    ClassShare { class: c, train_indices }
                })
                .collect();
            client.tasks.push(TaskAllocation { task_id: task.task_id, fraction, shares });
        }
    }
    Ok(clients)
}

/// Identifies one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleId {
    pub task: usize,
    pub class: usize,
    pub index: usize,
}

/// A client's materialized data for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTaskData {
    pub task_id: usize,
    pub train: Batch,
    pub test: Batch,
    pub train_ids: Vec<SampleId>,
    pub test_ids: Vec<SampleId>,
}

impl ClientTaskData {
    pub fn train_len(&self) -> usize {
        self.train.len()
    }
}

/// Builds a client's train and test sets for `task`.
///
/// Training data comes from the client's allocated slice; the test set is
/// the whole test split of every allocated class. Labels are within-task.
pub fn sample_batches(allocation: &TaskAllocation, task: &TaskSpec, seed: u64) -> Result<ClientTaskData> {
    if allocation.task_id != task.task_id {
        return Err(Error::protocol(format!(
            "allocation for task {} used with task {}",
            allocation.task_id, task.task_id
        )));
    }
    let train_split = task.train_count();
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for share in &allocation.shares {
        for &index in &share.train_indices {
            train_ids.push(SampleId { task: task.task_id, class: share.class, index });
        }
        for index in train_split..task.samples_per_class {
            test_ids.push(SampleId { task: task.task_id, class: share.class, index });
        }
    }
    let build = |ids: &[SampleId]| -> Result<Batch> {
        let mut data = Vec::with_capacity(ids.len() * task.input_dim());
        for id in ids {
            data.extend(task.sample(seed, id.class, id.index));
        }
        Batch::new(Matrix::new(ids.len(), task.input_dim(), data)?, ids.iter().map(|id| id.class).collect())
    };
    Ok(ClientTaskData {
        task_id: task.task_id,
        train: build(&train_ids)?,
        test: build(&test_ids)?,
        train_ids,
        test_ids,
    })
}

/// Mean pairwise Jaccard similarity of client class sets for one task.
///
/// Returns 1.0 with fewer than two clients.
pub fn mean_jaccard(allocations: &[ClientAllocation], task_id: usize) -> f64 {
    let sets: Vec<Vec<usize>> = allocations
        .iter()
        .filter_map(|a| a.tasks.iter().find(|t| t.task_id == task_id))
        .map(TaskAllocation::classes)
        .collect();
    if sets.len() < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let inter = sets[i].iter().filter(|c| sets[j].contains(c)).count();
            let union = sets[i].len() + sets[j].len() - inter;
            total += inter as f64 / union as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> StreamParams {
        StreamParams { num_tasks: 5, classes_per_task: 4, input_dim: 8, spread: 0.5, samples_per_class: 200 }
    }

    #[test]
    fn class_ids_partition_by_task() {
        let s = make_stream(1, &params()).unwrap();
        assert_eq!(s.len(), 5);
        let all: Vec<usize> = s.iter().flat_map(|t| t.class_ids.clone()).collect();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for t in &s {
            assert_eq!(t.class_ids.len(), 4);
            for m in &t.means {
                let r = m.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((r - CENTROID_RADIUS).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streams_are_seeded() {
        assert_eq!(make_stream(7, &params()).unwrap(), make_stream(7, &params()).unwrap());
        assert_ne!(make_stream(7, &params()).unwrap(), make_stream(8, &params()).unwrap());
    }

    #[test]
    fn single_client_gets_a_covering_subset() {
        let s = make_stream(2, &params()).unwrap();
        let a = allocate_clients(2, &s, 1).unwrap();
        for t in &a[0].tasks {
            // 4 classes, one client: coverage forces all four.
            assert_eq!(t.classes(), vec![0, 1, 2, 3]);
            assert!((MIN_SAMPLE_FRACTION..=MAX_SAMPLE_FRACTION).contains(&t.fraction));
        }
    }

    #[test]
    fn impossible_coverage_is_config_error() {
        let p = StreamParams { classes_per_task: 12, ..params() };
        let s = make_stream(2, &p).unwrap();
        assert!(matches!(allocate_clients(2, &s, 2), Err(Error::Config(_))));
        let p = StreamParams { classes_per_task: 1, ..params() };
        let s = make_stream(2, &p).unwrap();
        assert!(allocate_clients(2, &s, 3).is_err());
    }

    #[test]
    fn shares_are_disjoint_across_clients() {
        let s = make_stream(3, &params()).unwrap();
        let a = allocate_clients(3, &s, 6).unwrap();
        for task in 0..5 {
            for class in 0..4 {
                let mut seen = std::collections::HashSet::new();
                for client in &a {
                    for share in client.tasks[task].shares.iter().filter(|sh| sh.class == class) {
                        for &i in &share.train_indices {
                            assert!(i < s[task].train_count());
                            assert!(seen.insert(i), "index {i} shared");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batches_respect_allocation_and_split() {
        let s = make_stream(4, &params()).unwrap();
        let a = allocate_clients(4, &s, 3).unwrap();
        let alloc = &a[1].tasks[2];
        let data = sample_batches(alloc, &s[2], 4).unwrap();
        let classes = alloc.classes();
        assert!(data.train.labels.iter().all(|y| classes.contains(y)));
        assert!(data.test.labels.iter().all(|y| classes.contains(y)));
        let train: std::collections::HashSet<_> = data.train_ids.iter().collect();
        assert!(data.test_ids.iter().all(|id| !train.contains(id)));
        assert!(data.train_ids.iter().all(|id| id.index < s[2].train_count()));
        assert_eq!(data, sample_batches(alloc, &s[2], 4).unwrap());
        assert!(sample_batches(alloc, &s[1], 4).is_err());
    }

    #[test]
    fn jaccard_of_identical_sets_is_one() {
        let s = make_stream(5, &params()).unwrap();
        let a = allocate_clients(5, &s, 1).unwrap();
        assert_eq!(mean_jaccard(&a, 0), 1.0);
        let b = vec![a[0].clone(), ClientAllocation { client_id: 1, ..a[0].clone() }];
        assert_eq!(mean_jaccard(&b, 0), 1.0);
    }
}
