#![allow(dead_code)]

use epictrl::estimation::guess_initial_state;
use epictrl::model::{build_sidher, estimate_lipschitz};
use epictrl::observer::{assemble_sdp, run_observer, solve_observer_sdp, verify_gains, ObserverGains};
use epictrl::ocp::OcpSpec;
use epictrl::sim::{generate_dataset, NominalInput, StepControl};
use epictrl::{DataSet, Domain, NoiseSpec, ParameterVector, StructuredModel, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

pub const X0: [f64; 6] = [0.999, 0.0005, 0.0005, 0.0, 0.0, 0.0];

pub fn truth_model() -> StructuredModel {
    build_sidher(&ParameterVector::reference_truth()).unwrap()
}

pub fn paper_data(noise_std: f64, seed: u64) -> (DataSet, Trajectory) {
    generate_dataset(
        &truth_model(),
        &X0,
        &NominalInput,
        0.0,
        30.0,
        0.1,
        &NoiseSpec::uniform(noise_std, noise_std, seed),
        &StepControl::default(),
    )
    .unwrap()
}

/// Verified gains for `model` with the simplex Lipschitz bound.
pub fn simplex_gains(model: &StructuredModel) -> ObserverGains {
    let ell = estimate_lipschitz(model, &Domain::sidher_simplex(), 21).unwrap().value;
    let problem = assemble_sdp(model, ell, 1e-6).unwrap();
    let gains = solve_observer_sdp(&problem).unwrap().gains.expect("observer SDP feasible");
    assert!(verify_gains(&gains, &problem, 1e-7).passed);
    gains
}

/// Uniform point in the interior of the unit simplex.
pub fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Control problem from day 30 with the published estimates and the observer
/// estimate of the state on noisy data.
pub fn paper_ocp() -> OcpSpec {
    let hat = build_sidher(&ParameterVector::reference_estimate()).unwrap();
    let (data, truth) = paper_data(1e-3, 7);
    let gains = simplex_gains(&hat);
    let run = run_observer(
        &gains,
        &hat,
        &data,
        &guess_initial_state(&data, 0),
        Some(&truth),
        &StepControl::default(),
    )
    .unwrap();
    let x_init = run.x_hat.last().unwrap().clone();
    OcpSpec::sidher(hat, x_init, 30.0)
}
