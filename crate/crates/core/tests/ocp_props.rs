mod common;

use std::sync::OnceLock;

use common::paper_ocp;
use epictrl::ocp::{gradient_check, shoot, solve_ocp, OcpOptions, OcpSolution, OcpSpec, OcpStatus};
use proptest::prelude::*;

fn scenario() -> &'static (OcpSpec, OcpSolution) {
    static S: OnceLock<(OcpSpec, OcpSolution)> = OnceLock::new();
    S.get_or_init(|| {
        let spec = paper_ocp();
        let sol = solve_ocp(&spec, &OcpOptions::default()).unwrap();
        (spec, sol)
    })
}

fn controls() -> impl Strategy<Value = Vec<f64>> {
    let (spec, _) = scenario();
    spec.lower()
        .into_iter()
        .zip(spec.upper())
        .map(|(lo, hi)| lo..=hi)
        .collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn sensitivity_gradient_matches_central_differences(v in controls()) {
        let check = gradient_check(&scenario().0, &v, 1e-6).unwrap();
        prop_assert!(check.relative_error <= 1e-4, "{}", check.relative_error);
    }
}

#[test]
fn solution_is_feasible_and_improves_on_the_guess() {
    let (spec, sol) = scenario();
    assert_eq!(sol.solver.status, OcpStatus::Optimal);
    let (lo, hi) = (spec.lower(), spec.upper());
    for (k, v) in sol.policy.flat().iter().enumerate() {
        assert!(*v >= lo[k] && *v <= hi[k]);
    }
    assert!(sol.constraint_report.limits.iter().all(|l| l.margin >= -1e-6));
    assert!(sol.cost <= sol.initial_cost);
    let replay = shoot(spec, &sol.policy.flat()).unwrap();
    assert_eq!(replay.cost, sol.cost);
}

#[test]
fn solve_is_deterministic() {
    let (spec, sol) = scenario();
    let again = solve_ocp(spec, &OcpOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(sol).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn minimal_controls_violate_a_path_limit() {
    let (spec, _) = scenario();
    let r = shoot(spec, &spec.lower()).unwrap();
    assert!(r.max_violation() > 1e-6);
}

#[test]
fn feasible_constant_policies_cost_at_least_the_optimum() {
    let (spec, sol) = scenario();
    for u in [[0.5, 0.9, 0.4, 0.35], [1.0, 0.9, 0.7, 0.7], [1.0, 0.9, 0.4, 0.35]] {
        let r = shoot(spec, &spec.constant(&u)).unwrap();
        if r.max_violation() <= 1e-6 {
            assert!(sol.cost <= r.cost, "{u:?}: {} > {}", sol.cost, r.cost);
        }
    }
}

#[test]
fn feasible_one_percent_perturbations_do_not_lower_the_cost() {
    let (spec, sol) = scenario();
    // Perturbations that push an active limit further than the optimum does are
    // excluded; they only trade cost for feasibility tolerance.
    let allowed = sol.solver.max_violation.max(0.0);
    let (lo, hi) = (spec.lower(), spec.upper());
    let v = sol.policy.flat();
    for k in 0..v.len() {
        for s in [-0.01, 0.01] {
            let mut p = v.clone();
            p[k] = (v[k] * (1.0 + s)).clamp(lo[k], hi[k]);
            if p[k] == v[k] {
                continue;
            }
            let r = shoot(spec, &p).unwrap();
            if r.max_violation() <= allowed {
                assert!(r.cost >= sol.cost - 1e-6, "variable {k}, {s}: {} < {}", r.cost, sol.cost);
            }
        }
    }
}
