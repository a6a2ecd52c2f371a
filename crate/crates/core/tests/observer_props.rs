mod common;

use std::sync::OnceLock;

use common::{paper_data, rng, simplex_gains, simplex_point, truth_model, X0};
use epictrl::estimation::guess_initial_state;
use epictrl::linalg::{max_eigenvalue, max_singular_value};
use epictrl::model::{build_sidher, estimate_lipschitz};
use epictrl::observer::{
    assemble_sdp, error_system_check, fit_exponential_decay, iss_decay_metrics, iss_experiment, run_observer,
    solve_observer_sdp, verify_gains, ObserverGains,
};
use epictrl::sim::{generate_dataset, ConstantInput, NominalInput, StepControl};
use epictrl::{Domain, NoiseSpec, ParameterVector, StructuredModel};

fn exact() -> &'static (StructuredModel, ObserverGains) {
    static G: OnceLock<(StructuredModel, ObserverGains)> = OnceLock::new();
    G.get_or_init(|| {
        let m = truth_model();
        let g = simplex_gains(&m);
        (m, g)
    })
}

#[test]
fn gains_satisfy_the_design_inequalities() {
    let (m, g) = exact();
    let problem = assemble_sdp(m, g.lipschitz, g.margin).unwrap();
    let [b1, b2, b3] = problem.constraint_blocks(&g.decision());
    assert!(max_eigenvalue(&b1) <= -g.margin + 1e-7, "{}", max_eigenvalue(&b1));
    assert!(max_eigenvalue(&b2) <= 1e-7);
    assert!(max_eigenvalue(&b3) <= 1e-7);
    assert!(max_singular_value(&g.r).powi(2) <= g.mu + 1e-7);
    assert!(verify_gains(g, &problem, 1e-7).passed);
}

#[test]
fn state_estimate_is_z_plus_l_times_output() {
    let (m, g) = exact();
    let (data, truth) = paper_data(1e-3, 1);
    let run = run_observer(g, m, &data, &guess_initial_state(&data, 1), Some(&truth), &StepControl::default()).unwrap();
    assert_eq!(run.times, data.times);
    for k in 0..run.times.len() {
        let ly = &g.l * nalgebra::DVector::from_column_slice(&data.y_bar[k]);
        for i in 0..6 {
            assert!((run.x_hat[k][i] - (run.z[k][i] + ly[i])).abs() <= 1e-12);
        }
    }
}

#[test]
fn exact_start_tracks_without_error_under_constant_input() {
    let (m, g) = exact();
    let input = ConstantInput(vec![0.015, 0.025, 0.015, 0.025]);
    // Output interpolation leaves an O(dt²) disturbance; 0.02 days keeps it below 1e-6.
    let (data, truth) = generate_dataset(m, &X0, &input, 0.0, 30.0, 0.02, &NoiseSpec::none(), &StepControl::default())
        .unwrap();
    let run = run_observer(g, m, &data, &X0, Some(&truth), &StepControl::default()).unwrap();
    let worst = run.error_norms().unwrap().into_iter().fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst:.3e}");
}

#[test]
fn error_system_agrees_with_direct_error() {
    let (m, g) = exact();
    let (data, _) = paper_data(0.0, 0);
    let xhat0 = simplex_point(&mut rng(40), 6);
    let rep = error_system_check(g, m, m, &NominalInput, &X0, &data, &xhat0, &StepControl::default()).unwrap();
    assert!(rep.max_discrepancy <= 1e-6, "{:.3e}", rep.max_discrepancy);

    let noisy = generate_dataset(
        m,
        &X0,
        &NominalInput,
        0.0,
        30.0,
        0.1,
        &NoiseSpec::uniform(0.0, 1e-3, 3),
        &StepControl::default(),
    )
    .unwrap()
    .0;
    let rep = error_system_check(g, m, m, &NominalInput, &X0, &noisy, &xhat0, &StepControl::default()).unwrap();
    assert!(rep.max_discrepancy <= 1e-6, "{:.3e}", rep.max_discrepancy);
}

#[test]
fn undisturbed_error_decays_exponentially() {
    let (m, g) = exact();
    let input = ConstantInput(vec![0.015, 0.025, 0.015, 0.025]);
    let (data, truth) = generate_dataset(m, &X0, &input, 0.0, 10.0, 0.01, &NoiseSpec::none(), &StepControl::default())
        .unwrap();
    let xhat0 = simplex_point(&mut rng(41), 6);
    let run = run_observer(g, m, &data, &xhat0, Some(&truth), &StepControl::default()).unwrap();
    let (rate, _, r2) = fit_exponential_decay(&run.times, &run.error_norms().unwrap()).unwrap();
    assert!(rate > 0.0, "rate {rate}");
    assert!(r2 >= 0.9, "r² {r2}");
}

#[test]
fn noisy_terminal_error_stays_within_ten_times_the_noiseless_baseline() {
    let hat = build_sidher(&ParameterVector::reference_estimate()).unwrap();
    let g = simplex_gains(&hat);
    let terminal = |std: f64, seed: u64| {
        let (data, truth) = paper_data(std, seed);
        let run = run_observer(&g, &hat, &data, &guess_initial_state(&data, seed), Some(&truth), &StepControl::default())
            .unwrap();
        *run.error_norms().unwrap().last().unwrap()
    };
    for seed in 0..20 {
        let base = terminal(0.0, seed);
        let noisy = terminal(1e-3, seed);
        assert!(noisy <= 10.0 * base, "seed {seed}: {noisy:.3e} vs baseline {base:.3e}");
    }
}

#[test]
fn iss_report_is_deterministic() {
    let (m, g) = exact();
    let run = || {
        let s = iss_experiment(g, m, m, &NominalInput, &X0, &[0.0, 1e-3], &[0, 1, 2], &[5.0, 10.0], 0.1, &StepControl::default())
            .unwrap();
        iss_decay_metrics(&s).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_output_matrix_is_infeasible() {
    let m = truth_model().with_output_matrix(nalgebra::DMatrix::zeros(10, 6)).unwrap();
    let ell = estimate_lipschitz(&m, &Domain::sidher_simplex(), 21).unwrap().value;
    let syn = solve_observer_sdp(&assemble_sdp(&m, ell, 1e-6).unwrap()).unwrap();
    assert!(syn.gains.is_none(), "{:?}", syn.status);
}
