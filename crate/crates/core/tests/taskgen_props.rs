use std::collections::BTreeSet;

use fedcl::nn::{self, Activation, MlpShape};
use fedcl::rng::{Purpose, StreamKey};
use fedcl::taskgen::{self, StreamParams};
use proptest::prelude::*;

fn params(tasks: usize, cpt: usize, spread: f64, spc: usize) -> StreamParams {
    StreamParams { num_tasks: tasks, classes_per_task: cpt, input_dim: 16, spread, samples_per_class: spc }
}

#[test]
fn twenty_clients_cover_ten_classes_on_fifty_seeds() {
    for seed in 0..50 {
        let stream = taskgen::make_stream(seed, &params(3, 10, 1.0, 400)).unwrap();
        let alloc = taskgen::allocate_clients(seed, &stream, 20).unwrap();
        for t in 0..3 {
            let mut covered = BTreeSet::new();
            for c in &alloc {
                let ta = &c.tasks[t];
                let classes = ta.classes();
                assert!((2..=5).contains(&classes.len()), "seed {seed}");
                assert!((0.05..=0.10).contains(&ta.fraction), "seed {seed}");
                covered.extend(classes);
            }
            assert_eq!(covered.len(), 10, "seed {seed} task {t}");
            assert!(taskgen::mean_jaccard(&alloc, t) < 1.0);
        }
    }
}

#[test]
fn class_means_are_within_three_standard_errors() {
    let spread = 0.8;
    let n = 1000;
    let stream = taskgen::make_stream(4, &params(2, 4, spread, n)).unwrap();
    let bound = 3.0 * spread / (n as f64).sqrt();
    for task in &stream {
        for class in 0..task.num_classes() {
            let mut mean = vec![0.0; task.input_dim()];
            for i in 0..n {
                for (m, x) in mean.iter_mut().zip(task.sample(4, class, i)) {
                    *m += x / n as f64;
                }
            }
            for (m, c) in mean.iter().zip(&task.means[class]) {
                assert!((m - c).abs() <= bound, "task {} class {class}: {m} vs {c}", task.task_id);
            }
            let r = task.means[class].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - taskgen::CENTROID_RADIUS).abs() < 1e-12);
        }
    }
}

/// Test accuracy of a fresh reference-width MLP after 200 SGD steps on one task.
fn single_task_accuracy(spread: f64) -> f64 {
    let seed = 9;
    let stream = taskgen::make_stream(seed, &params(1, 4, spread, 250)).unwrap();
    let task = &stream[0];
    let full = taskgen::TaskAllocation {
        task_id: 0,
        fraction: 1.0,
        shares: (0..4)
            .map(|class| taskgen::ClassShare { class, train_indices: (0..task.train_count()).collect() })
            .collect(),
    };
    let data = taskgen::sample_batches(&full, task, seed).unwrap();
    let shape = MlpShape::new(vec![16, 32, 4], Activation::Relu).unwrap();
    let mut p = shape.init_params(&mut StreamKey::new(seed, Purpose::Init).rng());
    let mut rng = StreamKey::new(seed, Purpose::Shuffle).rng();
    for _ in 0..200 {
        let idx: Vec<usize> = (0..32).map(|_| rand::Rng::random_range(&mut rng, 0..data.train.len())).collect();
        let g = nn::grad_hard(&shape, &p, &data.train.select(&idx)).unwrap();
        p.descend(0.1, &g);
    }
    nn::accuracy(&shape, &p, &data.test).unwrap()
}

#[test]
fn spread_controls_difficulty() {
    let easy = single_task_accuracy(0.1);
    let hard = single_task_accuracy(2.0);
    assert!(easy >= 0.9, "spread 0.1 accuracy {easy}");
    assert!(hard < 0.9, "spread 2.0 accuracy {hard}");
}

#[test]
fn single_client_gets_a_two_to_five_class_subset() {
    let stream = taskgen::make_stream(1, &params(2, 8, 1.0, 50)).unwrap();
    let alloc = taskgen::allocate_clients(1, &stream, 1);
    // Eight classes cannot be covered by one client holding at most five.
    assert!(alloc.unwrap_err().is_config());
    let stream = taskgen::make_stream(1, &params(2, 4, 1.0, 50)).unwrap();
    let alloc = taskgen::allocate_clients(1, &stream, 1).unwrap();
    assert!(alloc[0].tasks.iter().all(|t| (2..=4).contains(&t.classes().len())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_are_deterministic_and_split_disjoint(seed in any::<u64>(), clients in 2usize..8) {
        let stream = taskgen::make_stream(seed, &params(2, 4, 1.0, 60)).unwrap();
        let a = taskgen::allocate_clients(seed, &stream, clients).unwrap();
        let b = taskgen::allocate_clients(seed, &stream, clients).unwrap();
        prop_assert_eq!(&a, &b);
        for c in &a {
            for task in &stream {
                let ta = &c.tasks[task.task_id];
                let d1 = taskgen::sample_batches(ta, task, seed).unwrap();
                let d2 = taskgen::sample_batches(ta, task, seed).unwrap();
                prop_assert_eq!(&d1.train, &d2.train);
                let train: BTreeSet<_> = d1.train_ids.iter().collect();
                prop_assert!(d1.test_ids.iter().all(|id| !train.contains(id)));
                prop_assert!(d1.train_ids.iter().all(|id| id.index < task.train_count()));
                let allowed: BTreeSet<usize> = ta.classes().into_iter().collect();
                prop_assert!(d1.train.labels.iter().all(|l| allowed.contains(l)));
            }
        }
    }
}
