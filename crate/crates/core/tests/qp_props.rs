mod common;

use acdc_core::qp::{check_kkt, solve_qp, QpProblem, QpStatus};
use acdc_core::rng::Rng;
use proptest::prelude::*;

const TOL: f64 = 1e-8;

fn solve(prob: &QpProblem) -> acdc_core::qp::QpSolution {
    let sol = solve_qp(prob, TOL, 20_000).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal, "{}", sol.message);
    sol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_exhaustive_oracle(seed in any::<u64>()) {
        let prob = common::random_qp(&mut Rng::new(seed));
        let sol = solve(&prob);
        let oracle = common::active_set_oracle(&prob).unwrap();
        prop_assert!(common::max_abs_diff(sol.x.as_slice(), oracle.as_slice()) <= 1e-6);
    }

    #[test]
    fn optimal_solutions_are_certified(seed in any::<u64>()) {
        let prob = common::random_qp(&mut Rng::new(seed));
        let sol = solve(&prob);
        let kkt = check_kkt(&prob, &sol).unwrap();
        prop_assert!(kkt.within(TOL));
        let slack = &prob.h - &prob.g * &sol.x;
        for (z, s) in sol.z_ineq.iter().zip(slack.iter()) {
            prop_assert!(*z >= -TOL);
            prop_assert!((z * s).abs() <= TOL);
        }
    }

    #[test]
    fn objective_scaling_keeps_the_minimizer(seed in any::<u64>(), c in 0.01f64..100.0) {
        let prob = common::random_qp(&mut Rng::new(seed));
        let mut scaled = prob.clone();
        scaled.p *= c;
        scaled.q *= c;
        let a = solve(&prob);
        let b = solve(&scaled);
        prop_assert!(common::max_abs_diff(a.x.as_slice(), b.x.as_slice()) <= 10.0 * TOL);
    }

    #[test]
    fn solves_are_deterministic(seed in any::<u64>()) {
        let prob = common::random_qp(&mut Rng::new(seed));
        let a = solve(&prob);
        let b = solve(&prob);
        prop_assert_eq!(a.x, b.x);
        prop_assert_eq!(a.iterations, b.iterations);
    }
}
