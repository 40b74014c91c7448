//! Oracle-backed verification checks, runnable from the CLI.
//!
//! Each check draws seeded random instances and compares the production
//! code path against an independent reference from [`crate::oracle`].

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::federation::{aggregate, eta_global, eta_local, ClientWeight, ScheduleConfig, Upload};
use crate::integrator::{self, ConstraintSet, ConstraintSource, SolverConfig, FEASIBILITY_TOL};
use crate::knowledge;
use crate::nn::{self, Activation, Batch, LogitTargets, Matrix, MlpShape, ParamVector};
use crate::oracle;
use crate::rng::{Purpose, StreamKey, StreamRng};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckOutcome { name, passed, detail, elapsed: start.elapsed() }
}

fn rng(seed: u64, tag: u64) -> StreamRng {
    StreamKey::new(seed, Purpose::Init).extra(0x5e1f_7e57 ^ tag).rng()
}

fn gaussian_vec(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// A random network and batch no larger than `[8, 10, 6]` with 16 rows.
pub fn random_instance(rng: &mut StreamRng) -> (MlpShape, ParamVector, Batch) {
    let depth = rng.random_range(2..=3usize);
    let mut sizes = vec![rng.random_range(2..=8usize)];
    if depth == 3 {
        sizes.push(rng.random_range(2..=10usize));
    }
    sizes.push(rng.random_range(2..=6usize));
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let shape = MlpShape::new(sizes, activation).expect("valid sizes");
    let params = ParamVector(gaussian_vec(rng, shape.param_count(), 1.0));
    let n = rng.random_range(1..=16usize);
    let inputs = Matrix::new(n, shape.input_dim(), gaussian_vec(rng, n * shape.input_dim(), 2.0)).expect("sized");
    let labels = (0..n).map(|_| rng.random_range(0..shape.num_classes())).collect();
    (shape, params, Batch::new(inputs, labels).expect("non-empty"))
}

fn random_targets(rng: &mut StreamRng, n: usize, classes: usize) -> LogitTargets {
    let mut m = Matrix::zeros(n, classes);
    for r in 0..n {
        let row = m.row_mut(r);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = rng.random_range(0.01..1.0);
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    LogitTargets { probabilities: m }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Max relative error of hard and soft backprop against central differences.
pub fn gradient_check(instances: usize, seed: u64) -> (f64, usize) {
    let mut rng = rng(seed, 1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..instances {
        let (shape, params, batch) = random_instance(&mut rng);
        let sizes = shape.layer_sizes().to_vec();
        let act = shape.activation();
        let xs = rows_of(&batch.inputs);

        let analytic = nn::grad_hard(&shape, &params, &batch).expect("valid instance");
        let numeric =
            oracle::central_difference(|p| oracle::hard_loss(&sizes, act, p, &xs, &batch.labels), &params, 1e-5);
        worst = worst.max(oracle::max_relative_error(&analytic, &numeric, 1e-8));

        let targets = random_targets(&mut rng, batch.len(), shape.num_classes());
        let qs = rows_of(&targets.probabilities);
        let analytic = nn::grad_soft(&shape, &params, &batch.inputs, &targets).expect("valid instance");
        let numeric = oracle::central_difference(|p| oracle::soft_loss(&sizes, act, p, &xs, &qs), &params, 1e-5);
        worst = worst.max(oracle::max_relative_error(&analytic, &numeric, 1e-8));
        checked += 2 * params.len();
    }
    (worst, checked)
}

/// Summary of the dual-QP comparison against active-set enumeration.
#[derive(Debug, Clone, Default)]
pub struct QpCheck {
    pub instances: usize,
    pub max_objective_gap: f64,
    pub min_feasibility: f64,
    pub infeasible: usize,
    pub acute_instances: usize,
    pub acute_bitwise: usize,
    pub max_rotation_excess: f64,
    pub nonconverged: usize,
}

/// Random constraint instance with `k <= 4`, `n <= 12`.
pub fn random_qp(rng: &mut StreamRng) -> (ConstraintSet, ParamVector) {
    let k = rng.random_range(1..=4usize);
    let n = rng.random_range(2..=12usize);
    let rows = (0..k).map(|_| ParamVector(gaussian_vec(rng, n, 1.0))).collect();
    let g = ParamVector(gaussian_vec(rng, n, 1.0));
    (ConstraintSet::new(rows, (0..k).map(ConstraintSource::Task).collect()).expect("finite rows"), g)
}

pub fn qp_check(instances: usize, seed: u64) -> QpCheck {
    let mut rng = rng(seed, 2);
    let cfg = SolverConfig::default();
    let mut out = QpCheck { instances, min_feasibility: f64::INFINITY, ..Default::default() };
    for _ in 0..instances {
        let (set, g) = random_qp(&mut rng);
        let q: Vec<Vec<f64>> = set.rows().iter().map(|a| set.rows().iter().map(|b| nn::dot(a, b)).collect()).collect();
        let c: Vec<f64> = set.rows().iter().map(|r| nn::dot(r, &g)).collect();
        let (v_star, obj_star) = oracle::nonneg_qp_enumerate(&q, &c);

        let sol = integrator::solve_dual(&set, &g, &cfg).expect("valid instance");
        out.nonconverged += usize::from(!sol.converged);
        let obj = integrator::dual_objective(&set, &g, &sol.v).expect("valid instance");
        out.max_objective_gap = out.max_objective_gap.max((obj - obj_star).abs());

        let res = integrator::integrate(&set, &g, &cfg).expect("valid instance");
        let feas = set.rows().iter().map(|r| nn::dot(r, &res.gradient)).fold(f64::INFINITY, f64::min);
        out.min_feasibility = out.min_feasibility.min(feas);
        out.infeasible += usize::from(feas < -FEASIBILITY_TOL);
        if !integrator::needs_projection(&set, &g, cfg.eps).expect("valid instance") {
            out.acute_instances += 1;
            out.acute_bitwise +=
                usize::from(res.gradient.iter().zip(g.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // Primal optimality: the oracle's g' = g + G^T v* is feasible; ours is no farther from g.
        let mut h = g.to_vec();
        for (row, &vj) in set.rows().iter().zip(&v_star) {
            for (hi, r) in h.iter_mut().zip(row.iter()) {
                *hi += vj * r;
            }
        }
        let dist = |x: &[f64]| x.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        out.max_rotation_excess = out.max_rotation_excess.max(dist(&res.gradient) - dist(&h));
    }
    out
}

/// Max abs coordinate error of single-constraint integration against
/// `g - (<g1, g> / ||g1||^2) g1` over random obtuse pairs.
pub fn single_constraint_check(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed, 3);
    let mut worst: f64 = 0.0;
    let mut made = 0;
    while made < instances {
        let n = rng.random_range(2..=12usize);
        let g = ParamVector(gaussian_vec(&mut rng, n, 1.0));
        let g1 = gaussian_vec(&mut rng, n, 1.0);
        let ip = nn::dot(&g1, &g);
        if ip >= 0.0 {
            continue;
        }
        made += 1;
        let nsq = nn::dot(&g1, &g1);
        let set = ConstraintSet::single(ParamVector(g1.clone()), ConstraintSource::Task(0)).expect("finite");
        let out = integrator::integrate(&set, &g, &SolverConfig::default()).expect("valid");
        for i in 0..n {
            let expected = g[i] - ip / nsq * g1[i];
            worst = worst.max((out.gradient[i] - expected).abs());
        }
    }
    worst
}

/// Number of (vector, rho) cases where top-ρ extraction differs from a full sort.
pub fn knowledge_check(vectors: usize, dim: usize, rhos: &[f64], seed: u64) -> usize {
    let mut rng = rng(seed, 4);
    let mut mismatches = 0;
    for _ in 0..vectors {
        let v = ParamVector(gaussian_vec(&mut rng, dim, 1.0));
        for &rho in rhos {
            let k = knowledge::extract_knowledge(0, rho, &v).expect("valid rho");
            let expected = oracle::top_magnitude_indices(&v, knowledge::retained_count(rho, dim));
            let got: Vec<usize> = k.indices().collect();
            let values_ok = k.entries.iter().all(|&(i, x)| x.to_bits() == v[i].to_bits());
            if got != expected || !values_ok {
                mismatches += 1;
            }
        }
    }
    mismatches
}

/// Violations of `eta_global(r) * mu * (gamma + r) <= 2` for `r` in `1..=max_r`.
pub fn schedule_violations(cfg: &ScheduleConfig, max_r: usize) -> usize {
    (1..=max_r).filter(|&r| eta_global(cfg, r) * cfg.mu * (cfg.gamma + r as f64) > 2.0).count()
}

/// Number of random instances where permuting the uploads changes the aggregate bits.
pub fn aggregation_permutation_check(instances: usize, seed: u64) -> usize {
    use rand::seq::SliceRandom;
    let mut rng = rng(seed, 5);
    let mut failures = 0;
    for _ in 0..instances {
        let clients = rng.random_range(1..=8usize);
        let len = rng.random_range(1..=20usize);
        let counts: Vec<usize> = (0..clients).map(|_| rng.random_range(1..=100usize)).collect();
        let total: usize = counts.iter().sum();
        let mut uploads: Vec<Upload> = (0..clients)
            .map(|c| Upload {
                client_id: c,
                slice: gaussian_vec(&mut rng, len, 3.0),
                weight: ClientWeight(counts[c] as f64 / total as f64),
            })
            .collect();
        // Weights that do not sum to 1 within 1e-12 are rejected; renormalize the last.
        let head: f64 = uploads[..clients - 1].iter().map(|u| u.weight.0).sum();
        uploads[clients - 1].weight = ClientWeight(1.0 - head);
        let Ok(base) = aggregate(&uploads) else {
            failures += 1;
            continue;
        };
        uploads.shuffle(&mut rng);
        match aggregate(&uploads) {
            Ok(again) if again.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()) => {}
            _ => failures += 1,
        }
    }
    failures
}

/// Runs the quick oracle suite.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    out.push(timed("gradient vs central differences", || {
        let (worst, coords) = gradient_check(20, seed);
        (worst <= 1e-4, format!("max rel err {worst:.3e} over {coords} coordinates (tol 1e-4)"))
    }));
    out.push(timed("dual QP vs active-set enumeration", || {
        let q = qp_check(200, seed);
        let ok = q.max_objective_gap <= 1e-8 && q.infeasible == 0 && q.acute_bitwise == q.acute_instances;
        (
            ok,
            format!(
                "objective gap {:.3e}, min <row,g'> {:.3e}, acute bitwise {}/{}, rotation excess {:.3e}",
                q.max_objective_gap, q.min_feasibility, q.acute_bitwise, q.acute_instances, q.max_rotation_excess
            ),
        )
    }));
    out.push(timed("single-constraint closed form", || {
        let worst = single_constraint_check(50, seed);
        (worst <= 1e-10, format!("max abs err {worst:.3e} (tol 1e-10)"))
    }));
    out.push(timed("top-rho extraction vs full sort", || {
        let bad = knowledge_check(100, 1000, &[0.05, 0.1, 0.2], seed);
        (bad == 0, format!("{bad} mismatches over 300 cases"))
    }));
    out.push(timed("learning-rate constraints", || {
        let cfg = ScheduleConfig::new(0.001, 1.0, 1.0, 8.0, 3).expect("valid schedule");
        let violations = schedule_violations(&cfg, 1_000_000);
        let ratio = eta_local(&cfg, 4) / eta_local(&cfg, 1);
        (violations == 0 && ratio == 0.5, format!("{violations} bound violations; eta_local(4)/eta_local(1) = {ratio}"))
    }));
    out.push(timed("FedAvg exactness", || {
        let up = |id, v: f64, w| Upload { client_id: id, slice: vec![v], weight: ClientWeight(w) };
        let agg = aggregate(&[up(0, 1.0, 0.25), up(1, 5.0, 0.75)]).map(|v| v[0]).unwrap_or(f64::NAN);
        let perm_failures = aggregation_permutation_check(50, seed);
        (
            agg == 4.0 && perm_failures == 0,
            format!("[1],[5] @ (0.25,0.75) -> {agg}; {perm_failures} permutation failures"),
        )
    }));
    out.push(timed("restored gradient vs central differences", || {
        let mut rng = rng(seed, 6);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let (shape, params, batch) = random_instance(&mut rng);
            let old = ParamVector(gaussian_vec(&mut rng, params.len(), 1.0));
            let k = knowledge::extract_knowledge(0, 0.3, &old).expect("valid rho");
            let g = knowledge::restore_gradient(&shape, &params, &k, &batch.inputs).expect("valid instance");
            let past = knowledge::materialize(&shape, &k).expect("valid");
            let xs = rows_of(&batch.inputs);
            let sizes = shape.layer_sizes().to_vec();
            let act = shape.activation();
            let qs: Vec<Vec<f64>> = xs.iter().map(|x| oracle::forward_one(&sizes, act, &past, x)).collect();
            let numeric = oracle::central_difference(|p| oracle::soft_loss(&sizes, act, p, &xs, &qs), &params, 1e-5);
            worst = worst.max(oracle::max_relative_error(&g, &numeric, 1e-8));
        }
        (worst <= 1e-4, format!("max rel err {worst:.3e} (tol 1e-4)"))
    }));
    out.push(timed("signature selection vs full sort", || {
        let mut rng = rng(seed, 7);
        let mut store = knowledge::KnowledgeStore::new();
        let mut grads = BTreeMap::new();
        for t in 0..10 {
            store
                .insert(knowledge::extract_knowledge(t, 1.0, &ParamVector(vec![0.0; 50])).expect("valid"))
                .expect("contiguous");
            grads.insert(t, ParamVector(gaussian_vec(&mut rng, 50, 1.0 + t as f64 * 0.1)));
        }
        let current = gaussian_vec(&mut rng, 50, 1.0);
        let sel =
            knowledge::select_signature_tasks(&store, &current, &grads, 3, knowledge::DistanceMetric::Wasserstein)
                .expect("valid");
        let mut brute: Vec<(usize, f64)> = grads
            .iter()
            .map(|(&t, g)| {
                let mut a = g.to_vec();
                let mut b = current.clone();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                (t, a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 50.0)
            })
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        let expected: Vec<usize> = brute.iter().take(3).map(|x| x.0).collect();
        (sel.selected_task_ids == expected, format!("selected {:?}, oracle {:?}", sel.selected_task_ids, expected))
    }));
    out
}
