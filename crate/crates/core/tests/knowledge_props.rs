use std::collections::BTreeMap;

use fedcl::knowledge::{self, DistanceMetric, KnowledgeStore};
use fedcl::nn::{self, Activation, Batch, Matrix, MlpShape, ParamVector};
use fedcl::oracle;
use fedcl::rng::{Purpose, StreamKey};
use fedcl::selftest::knowledge_check;
use proptest::prelude::*;

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn extraction_matches_full_sort(v in finite_vec(1..300), rho in 0.001f64..=1.0) {
        let p = ParamVector(v);
        let k = knowledge::extract_knowledge(0, rho, &p).unwrap();
        let want = oracle::top_magnitude_indices(&p, knowledge::retained_count(rho, p.len()));
        prop_assert_eq!(k.indices().collect::<Vec<_>>(), want);
        prop_assert!(k.entries.iter().all(|&(i, x)| x.to_bits() == p[i].to_bits()));
    }

    #[test]
    fn retained_count_is_ceiling_within_bounds(n in 1usize..5000, rho in 0.001f64..=1.0) {
        let c = knowledge::retained_count(rho, n);
        prop_assert!(c >= 1 && c <= n);
        prop_assert!(c as f64 >= rho * n as f64 - 1e-6);
        prop_assert!((c as f64) < rho * n as f64 + 1.0);
    }

    #[test]
    fn wasserstein_is_a_pseudometric(a in finite_vec(8..9), b in finite_vec(8..9), c in finite_vec(8..9)) {
        let d = |x: &[f64], y: &[f64]| knowledge::wasserstein1d(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn wasserstein_ignores_component_order(mut a in finite_vec(2..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let b = a.clone();
        a.shuffle(&mut StreamKey::new(seed, Purpose::Shuffle).rng());
        prop_assert_eq!(knowledge::wasserstein1d(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn materialized_model_keeps_exactly_the_knowledge(v in finite_vec(17..18), rho in 0.05f64..=1.0) {
        let shape = MlpShape::new(vec![3, 4], Activation::Relu).unwrap();
        let p = ParamVector(v[..16].to_vec());
        let k = knowledge::extract_knowledge(2, rho, &p).unwrap();
        let m = knowledge::materialize(&shape, &k).unwrap();
        let kept: Vec<usize> = k.indices().collect();
        for i in 0..16 {
            if kept.binary_search(&i).is_ok() {
                prop_assert_eq!(m[i], p[i]);
            } else {
                prop_assert_eq!(m[i], 0.0);
            }
        }
    }
}

#[test]
fn three_hundred_oracle_cases_match_exactly() {
    assert_eq!(knowledge_check(100, 1000, &[0.05, 0.1, 0.2], 21), 0);
}

#[test]
fn storage_grows_as_tasks_times_rho_times_params() {
    let n = 745;
    let rho = 0.1;
    let per_task = knowledge::retained_count(rho, n);
    let mut store = KnowledgeStore::new();
    let mut rng = StreamKey::new(5, Purpose::Init).rng();
    for m in 0..8 {
        let p = ParamVector((0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect());
        store.insert(knowledge::extract_knowledge(m, rho, &p).unwrap()).unwrap();
        assert_eq!(store.total_entries(), (m + 1) * per_task);
        assert!(store.iter().all(|k| k.background.is_none()));
    }
}

#[test]
fn knowledge_finetune_does_not_increase_training_loss() {
    let shape = MlpShape::new(vec![4, 6, 3], Activation::Tanh).unwrap();
    let mut rng = StreamKey::new(17, Purpose::Init).rng();
    let params = shape.init_params(&mut rng);
    let rows: Vec<Vec<f64>> =
        (0..24).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0).collect()).collect();
    let labels = (0..24).map(|i| i % 3).collect();
    let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
    let k = knowledge::extract_knowledge(0, 0.5, &params).unwrap();
    let before = nn::loss_hard(&shape, &knowledge::materialize(&shape, &k).unwrap(), &batch).unwrap();
    let tuned = knowledge::finetune_knowledge(&shape, &params, &k, &batch, 10, 1e-3).unwrap();
    let after = nn::loss_hard(&shape, &knowledge::materialize(&shape, &tuned).unwrap(), &batch).unwrap();
    assert!(after <= before, "{after} > {before}");
    assert_eq!(tuned.indices().collect::<Vec<_>>(), k.indices().collect::<Vec<_>>());
    let same = knowledge::finetune_knowledge(&shape, &params, &k, &batch, 0, 1e-3).unwrap();
    assert_eq!(same, k);
}

#[test]
fn restored_gradient_vanishes_when_current_equals_past_model() {
    let shape = MlpShape::new(vec![3, 5, 2], Activation::Relu).unwrap();
    let params = shape.init_params(&mut StreamKey::new(3, Purpose::Init).rng());
    let k = knowledge::extract_knowledge(0, 1.0, &params).unwrap();
    let inputs = Matrix::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.0, 1.0, -1.0]]).unwrap();
    let g = knowledge::restore_gradient(&shape, &params, &k, &inputs).unwrap();
    assert!(g.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn signature_selection_picks_farthest_restored_gradients() {
    let mut store = KnowledgeStore::new();
    let mut grads = BTreeMap::new();
    for t in 0..5 {
        store.insert(knowledge::extract_knowledge(t, 1.0, &ParamVector(vec![1.0; 4])).unwrap()).unwrap();
        grads.insert(t, ParamVector(vec![t as f64; 4]));
    }
    let current = vec![1.0; 4];
    let sel = knowledge::select_signature_tasks(&store, &current, &grads, 2, DistanceMetric::Wasserstein).unwrap();
    assert_eq!(sel.selected_task_ids, vec![4, 3]);
    let one = knowledge::select_signature_tasks(&store, &current, &grads, 10, DistanceMetric::Wasserstein).unwrap();
    assert_eq!(one.selected_task_ids.len(), 5);
}
