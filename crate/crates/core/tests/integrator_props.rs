use fedcl::integrator::{self, ConstraintSet, ConstraintSource, SolverConfig, FEASIBILITY_TOL};
use fedcl::nn::{dot, ParamVector};
use fedcl::oracle;
use fedcl::rng::{Purpose, StreamKey};
use fedcl::selftest::{qp_check, random_qp, single_constraint_check};
use proptest::prelude::*;

fn gram(set: &ConstraintSet, g: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let q = set.rows().iter().map(|a| set.rows().iter().map(|b| dot(a, b)).collect()).collect();
    let c = set.rows().iter().map(|r| dot(r, g)).collect();
    (q, c)
}

fn instance(seed: u64) -> (ConstraintSet, ParamVector) {
    random_qp(&mut StreamKey::new(seed, Purpose::Init).extra(99).rng())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dual_matches_enumeration(seed in any::<u64>()) {
        let (set, g) = instance(seed);
        let (q, c) = gram(&set, &g);
        let (_, best) = oracle::nonneg_qp_enumerate(&q, &c);
        let sol = integrator::solve_dual(&set, &g, &SolverConfig::default()).unwrap();
        prop_assert!(sol.v.iter().all(|&v| v >= 0.0));
        let obj = integrator::dual_objective(&set, &g, &sol.v).unwrap();
        prop_assert!((obj - best).abs() <= 1e-8, "{obj} vs {best}");
    }

    #[test]
    fn output_is_feasible(seed in any::<u64>()) {
        let (set, g) = instance(seed);
        let out = integrator::integrate(&set, &g, &SolverConfig::default()).unwrap();
        for r in set.rows() {
            prop_assert!(dot(r, &out.gradient) >= -FEASIBILITY_TOL);
        }
    }

    #[test]
    fn rotation_is_minimal_among_feasible_points(seed in any::<u64>()) {
        // g + G^T v for the enumeration optimum is the projection; ours must
        // be as close to g, and every other nonnegative v lands no closer.
        let (set, g) = instance(seed);
        let out = integrator::integrate(&set, &g, &SolverConfig::default()).unwrap();
        let d = |x: &[f64]| x.iter().zip(g.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let (q, c) = gram(&set, &g);
        let (v, _) = oracle::nonneg_qp_enumerate(&q, &c);
        let mut best = g.to_vec();
        for (row, vj) in set.rows().iter().zip(&v) {
            for (b, r) in best.iter_mut().zip(row.iter()) {
                *b += vj * r;
            }
        }
        prop_assert!(d(&out.gradient) <= d(&best) + 1e-6);
    }

    #[test]
    fn positive_scaling_of_g_scales_output(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let (set, g) = instance(seed);
        let cfg = SolverConfig::default();
        let base = integrator::integrate(&set, &g, &cfg).unwrap();
        let scaled_g = ParamVector(g.iter().map(|x| x * scale).collect());
        let scaled = integrator::integrate(&set, &scaled_g, &cfg).unwrap();
        // Rounding scales with the input: outputs that cancel to zero carry ulp noise of |g|.
        let norm = base.gradient.iter().chain(g.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in scaled.gradient.iter().zip(base.gradient.iter()) {
            prop_assert!((a - scale * b).abs() <= 1e-9 * (scale * norm).max(1e-12), "{a} vs {}", scale * b);
        }
    }

    #[test]
    fn acute_inputs_are_returned_bitwise(seed in any::<u64>()) {
        let (set, g) = instance(seed);
        let cfg = SolverConfig::default();
        if !integrator::needs_projection(&set, &g, cfg.eps).unwrap() {
            let out = integrator::integrate(&set, &g, &cfg).unwrap();
            prop_assert!(!out.projected);
            prop_assert!(out.gradient.iter().zip(g.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn two_hundred_instance_suite() {
    let q = qp_check(200, 11);
    assert!(q.max_objective_gap <= 1e-8, "{q:?}");
    assert_eq!(q.infeasible, 0);
    assert_eq!(q.acute_bitwise, q.acute_instances);
    assert_eq!(q.nonconverged, 0);
}

#[test]
fn fifty_single_constraint_pairs_match_closed_form() {
    assert!(single_constraint_check(50, 13) <= 1e-10);
}

#[test]
fn opposite_constraint_zeroes_the_gradient() {
    let g = ParamVector(vec![1.0, 2.0]);
    let set = ConstraintSet::single(ParamVector(vec![-1.0, -2.0]), ConstraintSource::Task(0)).unwrap();
    let out = integrator::integrate(&set, &g, &SolverConfig::default()).unwrap();
    assert!(out.gradient.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn identical_constraint_rows_are_handled() {
    let g = ParamVector(vec![1.0, 0.0]);
    let row = ParamVector(vec![-1.0, 1.0]);
    let set =
        ConstraintSet::new(vec![row.clone(), row], vec![ConstraintSource::Task(0), ConstraintSource::Task(1)]).unwrap();
    let out = integrator::integrate(&set, &g, &SolverConfig::default()).unwrap();
    assert!((out.gradient[0] - 0.5).abs() < 1e-9 && (out.gradient[1] - 0.5).abs() < 1e-9);
}
