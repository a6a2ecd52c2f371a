use super::*;
use crate::model::{build_sidher, ParameterVector, ZeroNonlinearity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// `ẋ = 0` with six states and four inputs.
fn frozen_model() -> StructuredModel {
    StructuredModel::new(
        DMatrix::zeros(6, 6),
        DMatrix::zeros(6, 1),
        DMatrix::identity(6, 6),
        DMatrix::from_row_slice(1, 6, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        Arc::new(ZeroNonlinearity { n_h: 1, n_u: 4, n_f: 1 }),
        None,
    )
    .unwrap()
}

fn sidher_spec() -> OcpSpec {
    let m = build_sidher(&ParameterVector::reference_estimate()).unwrap();
    OcpSpec::sidher(m, vec![0.6, 0.05, 0.01, 0.01, 0.001, 0.329], 30.0)
}

fn flat_trajectory(times: &[f64], x: &[f64]) -> Trajectory {
    Trajectory {
        times: times.to_vec(),
        states: vec![x.to_vec(); times.len()],
        outputs: vec![Vec::new(); times.len()],
        inputs: vec![Vec::new(); times.len()],
    }
}

#[test]
fn cost_of_zero_integrand_is_zero() {
    let spec = OcpSpec::sidher(frozen_model(), vec![0.0; 6], 0.0);
    let traj = flat_trajectory(&spec.grid(), &[0.0; 6]);
    let policy = spec.policy(&vec![0.0; spec.n_vars()]);
    assert_eq!(evaluate_cost(&traj, &policy, &spec.gamma, &spec.lambda).unwrap(), 0.0);
}

#[test]
fn cost_of_constant_input_without_state_weight() {
    let spec = OcpSpec::sidher(frozen_model(), vec![0.2; 6], 0.0);
    let traj = flat_trajectory(&spec.grid(), &[0.2; 6]);
    let u = [0.3, 0.2, 0.5, 0.1];
    let policy = spec.policy(&spec.constant(&u));
    let cost = evaluate_cost(&traj, &policy, &[0.0; 6], &spec.lambda).unwrap();
    let want = 70.0 * quad(&spec.lambda, &u);
    assert!((cost - want).abs() < 1e-12, "{cost} vs {want}");
}

#[test]
fn recovered_population_carries_no_weight() {
    let spec = OcpSpec::sidher(frozen_model(), vec![0.0; 6], 0.0);
    let x = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let traj = flat_trajectory(&spec.grid(), &x);
    let policy = spec.policy(&vec![0.0; spec.n_vars()]);
    assert_eq!(evaluate_cost(&traj, &policy, &spec.gamma, &spec.lambda).unwrap(), 0.0);
}

#[test]
fn cost_rejects_grid_without_period_boundaries() {
    let spec = OcpSpec::sidher(frozen_model(), vec![0.0; 6], 0.0);
    let traj = flat_trajectory(&[0.0, 10.0, 70.0], &[0.0; 6]);
    let policy = spec.policy(&vec![0.0; spec.n_vars()]);
    assert!(evaluate_cost(&traj, &policy, &spec.gamma, &spec.lambda).is_err());
}

#[test]
fn shooting_reports_constraint_values() {
    let x0 = vec![0.5, 0.1, 0.0, 0.01, 0.004, 0.386];
    let spec = OcpSpec::sidher(frozen_model(), x0, 0.0);
    let lo = spec.lower();
    let s = shoot(&spec, &lo).unwrap();
    assert!(!s.clamped);
    let e_values: Vec<f64> = s.constraints.iter().skip(2).step_by(3).cloned().collect();
    assert_eq!(e_values.len(), spec.grid().len() - 1);
    for e in e_values {
        assert!((e + 0.001).abs() < 1e-15, "{e}");
    }
}

#[test]
fn empty_horizon() {
    let mut spec = sidher_spec();
    spec.n_periods = 0;
    let s = shoot(&spec, &[]).unwrap();
    assert_eq!(s.cost, 0.0);
    assert!(s.constraints.is_empty());
}

#[test]
fn out_of_bounds_controls_are_clamped() {
    let spec = sidher_spec();
    let mut v = spec.lower();
    v[0] = 2.0;
    let s = shoot(&spec, &v).unwrap();
    assert!(s.clamped);
    let mut w = spec.lower();
    w[0] = 1.0;
    assert_eq!(s.cost, shoot(&spec, &w).unwrap().cost);
}

#[test]
fn constraint_report_examples() {
    let times = [0.0, 1.0, 2.0];
    let mut traj = flat_trajectory(&times, &[0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);
    let limits = sidher_spec().path_limits;
    let r = check_constraints(&traj, &limits, 1e-6);
    assert!(r.feasible);
    assert_eq!(r.limits[0].margin, 0.0);
    traj.states[1][4] = 0.006;
    let r = check_constraints(&traj, &limits, 1e-6);
    assert!(!r.feasible);
    assert!((r.limits[2].margin + 0.001).abs() < 1e-15);
    assert_eq!(r.limits[2].first_violation, Some(1.0));
}

#[test]
fn spec_validation() {
    let mut spec = sidher_spec();
    spec.lambda[2] = 0.0;
    assert!(spec.validate().is_err());
    let mut spec = sidher_spec();
    spec.path_limits[0].limit = 1.5;
    assert!(spec.validate().is_err());
    let mut spec = sidher_spec();
    spec.x_init.pop();
    assert!(spec.validate().is_err());
}

#[test]
fn grid_contains_period_edges() {
    let mut spec = sidher_spec();
    spec.constraint_grid_dt = 0.3;
    let g = spec.grid();
    for e in spec.period_edges() {
        assert!(g.iter().any(|t| (t - e).abs() < 1e-9), "{e}");
    }
    assert!(g.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn sensitivity_gradient_matches_differences() {
    let spec = sidher_spec();
    let (lo, hi) = (spec.lower(), spec.upper());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2 {
        let v: Vec<f64> = (0..spec.n_vars()).map(|j| rng.gen_range(lo[j]..=hi[j])).collect();
        let chk = gradient_check(&spec, &v, 1e-6).unwrap();
        assert!(chk.relative_error < 1e-4, "{chk:?}");
    }
}

#[test]
fn constraint_jacobian_matches_differences() {
    let spec = sidher_spec();
    let v = spec.constant(&[0.4, 0.5, 0.3, 0.2]);
    let der = shoot_with_derivatives(&spec, &v).unwrap();
    for j in [0, 5, 13, 19] {
        let h = 1e-6;
        let mut vp = v.clone();
        vp[j] += h;
        let cp = shoot(&spec, &vp).unwrap().constraints;
        vp[j] -= 2.0 * h;
        let cm = shoot(&spec, &vp).unwrap().constraints;
        for i in 0..cp.len() {
            let fd = (cp[i] - cm[i]) / (2.0 * h);
            assert!((fd - der.jacobian[(i, j)]).abs() < 1e-6, "row {i} col {j}");
        }
    }
}

#[test]
fn no_state_weight_and_slack_limits_give_lower_bounds() {
    let mut spec = sidher_spec();
    spec.gamma = vec![0.0; 6];
    spec.path_limits = vec![PathLimit {
        name: "I".into(),
        state: 1,
        limit: 1.0,
    }];
    let sol = solve_ocp(&spec, &OcpOptions::default()).unwrap();
    assert_eq!(sol.solver.status, OcpStatus::Optimal, "{:?}", sol.solver);
    for (a, b) in sol.policy.flat().iter().zip(spec.lower()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(sol.cost <= sol.initial_cost);
}

#[test]
fn policy_csv_layout() {
    let spec = sidher_spec();
    let csv = spec.policy(&spec.lower()).to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "period_start,u1,u2,u3,u4");
    assert_eq!(lines.len(), 6);
    assert!(lines[2].starts_with("4.4"));
}
