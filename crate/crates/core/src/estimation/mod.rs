//! Parameter estimation from input–output records.
//!
//! The detection/hospital rates follow in closed form from output ratios; the
//! remaining parameters are fitted by prediction-error minimization
//! `Σ_k w_k ‖ȳ(t_k) − y(t_k; ū, θ, x₀)‖` with trapezoid weights `w_k`.

pub mod lsq;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelFamily, ParameterVector, SidherFamily, PARAM_NAMES};
use crate::sim::{format_f64, integrate, DataSet, StepControl};

pub use lsq::{bounded_least_squares, LsqOptions, LsqOutcome, Termination};

/// Trapezoid quadrature weights on a (possibly nonuniform) grid.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for k in 1..n {
        let h = 0.5 * (times[k] - times[k - 1]);
        w[k - 1] += h;
        w[k] += h;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormVariant {
    /// `∫ȳ_a ȳ_b dt / ∫ȳ_a² dt`, the least-squares ratio.
    #[default]
    RatioOfIntegrals,
    /// Time average of the pointwise ratio `ȳ_b / ȳ_a`.
    PointwiseRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormRates {
    pub rho: f64,
    pub phi: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl ClosedFormRates {
    pub fn as_fixed_params(&self) -> BTreeMap<String, f64> {
        [
            ("rho", self.rho),
            ("phi", self.phi),
            ("sigma", self.sigma),
            ("xi", self.xi),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn closed_form_rates(data: &DataSet) -> Result<ClosedFormRates> {
    closed_form_rates_with(data, ClosedFormVariant::RatioOfIntegrals)
}

/// ρ from (y₃, y₄), φ from (y₃, y₅), σ from (y₆, y₇), ξ from (y₆, y₈).
pub fn closed_form_rates_with(data: &DataSet, variant: ClosedFormVariant) -> Result<ClosedFormRates> {
    data.validate()?;
    if data.n_y() < 8 {
        return Err(Error::dims("outputs for closed-form rates", 8, data.n_y()));
    }
    let w = trapezoid_weights(&data.times);
    let ch = |i: usize| -> Vec<f64> { data.y_bar.iter().map(|y| y[i]).collect() };
    let (d, h) = (ch(2), ch(5));
    let ratio = |den: &[f64], num: &[f64], name: &str| -> Result<f64> {
        let dd: f64 = (0..w.len()).map(|k| w[k] * den[k] * den[k]).sum();
        if !(dd >= 1e-30) {
            return Err(Error::InvalidInput(format!(
                "no signal for the {name} rate: ∫ȳ² dt = {dd:e}"
            )));
        }
        match variant {
            ClosedFormVariant::RatioOfIntegrals => {
                let dn: f64 = (0..w.len()).map(|k| w[k] * den[k] * num[k]).sum();
                Ok(dn / dd)
            }
            ClosedFormVariant::PointwiseRatio => {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for k in 0..w.len() {
                    if den[k].abs() >= 1e-30 {
                        acc += w[k] * num[k] / den[k];
                        wsum += w[k];
                    }
                }
                Ok(acc / wsum)
            }
        }
    };
    Ok(ClosedFormRates {
        rho: ratio(&d, &ch(3), "rho")?,
        phi: ratio(&d, &ch(4), "phi")?,
        sigma: ratio(&h, &ch(6), "sigma")?,
        xi: ratio(&h, &ch(7), "xi")?,
    })
}

const S0_RANGE: (f64, f64) = (0.95, 1.0);
const I0_RANGE: (f64, f64) = (0.0, 0.05);

/// Random (S₀, I₀) with the measured (D₀, H₀, E₀), completed to the unit simplex.
pub fn guess_initial_state(data: &DataSet, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0: f64 = rng.gen_range(S0_RANGE.0..=S0_RANGE.1);
    let i0: f64 = rng.gen_range(I0_RANGE.0..=I0_RANGE.1);
    let y0 = data.y_bar.first().cloned().unwrap_or_default();
    let pick = |i: usize| y0.get(i).cloned().unwrap_or(0.0).clamp(0.0, 1.0);
    let mut x = vec![s0, i0, pick(2), pick(5), pick(8), 0.0];
    let rest: f64 = x[1..5].iter().sum();
    if rest > 1.0 {
        for v in &mut x[1..5] {
            *v /= rest;
        }
        x[0] = 0.0;
    } else if x[0] + rest > 1.0 {
        x[0] = 1.0 - rest;
    }
    x[5] = (1.0 - x[..5].iter().sum::<f64>()).clamp(0.0, 1.0);
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// `Σ_k w_k ‖ȳ_k − y_k‖`.
    pub value: f64,
    /// `Σ_k w_k ‖ȳ_k − y_k‖²`.
    pub squared: f64,
    /// False when the simulation failed; both values are then `+∞`.
    pub finite: bool,
}

fn simulated_outputs(
    family: &dyn ModelFamily,
    data: &DataSet,
    theta: &[f64],
    x0: &[f64],
    control: &StepControl,
) -> Result<Vec<Vec<f64>>> {
    let model = family.build(theta)?;
    let input = data.input_signal();
    Ok(integrate(&model, x0, &input, &data.times, control)?.outputs)
}

fn weighted_residuals(
    family: &dyn ModelFamily,
    data: &DataSet,
    weights: &[f64],
    theta: &[f64],
    x0: &[f64],
    control: &StepControl,
) -> Result<Vec<f64>> {
    let y = simulated_outputs(family, data, theta, x0, control)?;
    let mut r = Vec::with_capacity(y.len() * data.n_y());
    for k in 0..y.len() {
        let s = weights[k].sqrt();
        r.extend(data.y_bar[k].iter().zip(&y[k]).map(|(a, b)| s * (a - b)));
    }
    Ok(r)
}

/// Prediction-error objective, driving the model with the interpolated record ū.
pub fn objective_value(
    family: &dyn ModelFamily,
    data: &DataSet,
    theta: &[f64],
    x0: &[f64],
    control: &StepControl,
) -> ObjectiveValue {
    let w = trapezoid_weights(&data.times);
    match simulated_outputs(family, data, theta, x0, control) {
        Ok(y) => {
            let (mut value, mut squared) = (0.0, 0.0);
            for k in 0..y.len() {
                let sq: f64 = data.y_bar[k]
                    .iter()
                    .zip(&y[k])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                value += w[k] * sq.sqrt();
                squared += w[k] * sq;
            }
            let finite = value.is_finite() && squared.is_finite();
            if finite {
                ObjectiveValue {
                    value,
                    squared,
                    finite,
                }
            } else {
                ObjectiveValue::failed()
            }
        }
        Err(_) => ObjectiveValue::failed(),
    }
}

impl ObjectiveValue {
    fn failed() -> Self {
        ObjectiveValue {
            value: f64::INFINITY,
            squared: f64::INFINITY,
            finite: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum InitialStatePolicy {
    /// [`guess_initial_state`] with the configuration seed.
    Guess,
    Given { x0: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    /// Parameters held at the given values.
    pub fixed_params: BTreeMap<String, f64>,
    /// Per-parameter bounds; missing entries default to `[0, 1]` (`β ∈ [0, 2]`).
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub theta_init: ParameterVector,
    pub x0_policy: InitialStatePolicy,
    /// Also fit S₀ and I₀, with R₀ = 1 − (S₀ + I₀ + D₀ + H₀ + E₀).
    pub estimate_initial_state: bool,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub multistart_count: usize,
    pub seed: u64,
    /// Fixed integration step used while fitting (days).
    pub sim_step: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            fixed_params: BTreeMap::new(),
            bounds: BTreeMap::new(),
            theta_init: ParameterVector::from_array([0.1; 9]),
            x0_policy: InitialStatePolicy::Guess,
            estimate_initial_state: true,
            max_iterations: 200,
            gradient_tolerance: 1e-12,
            multistart_count: 5,
            seed: 0,
            sim_step: 0.025,
        }
    }
}

impl EstimationConfig {
    pub fn bound(&self, name: &str) -> (f64, f64) {
        self.bounds
            .get(name)
            .cloned()
            .unwrap_or(if name == "beta" { (0.0, 2.0) } else { (0.0, 1.0) })
    }

    pub fn validate(&self) -> Result<()> {
        if self.multistart_count == 0 {
            return Err(Error::InvalidParameter {
                field: "multistart_count".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.sim_step > 0.0) {
            return Err(Error::InvalidParameter {
                field: "sim_step".into(),
                reason: "must be positive".into(),
            });
        }
        for name in self.fixed_params.keys().chain(self.bounds.keys()) {
            if ParameterVector::index_of(name).is_none() {
                return Err(Error::InvalidParameter {
                    field: name.clone(),
                    reason: "unknown parameter".into(),
                });
            }
        }
        let init = self.theta_init.to_array();
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            let (lo, hi) = self.bound(name);
            if !(lo <= hi) {
                return Err(Error::InvalidParameter {
                    field: name.to_string(),
                    reason: format!("empty bounds [{lo}, {hi}]"),
                });
            }
            if self.fixed_params.contains_key(*name) {
                continue;
            }
            if !(lo <= init[i] && init[i] <= hi) {
                return Err(Error::InvalidParameter {
                    field: name.to_string(),
                    reason: format!("initial value {} outside bounds [{lo}, {hi}]", init[i]),
                });
            }
        }
        if let InitialStatePolicy::Given { x0 } = &self.x0_policy {
            if x0.len() != 6 {
                return Err(Error::dims("initial state", 6, x0.len()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartResult {
    pub start: usize,
    pub theta_init: ParameterVector,
    pub theta: Option<ParameterVector>,
    pub x0: Option<Vec<f64>>,
    pub objective: f64,
    pub squared_objective: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInfo {
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub projected_gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub theta_hat: ParameterVector,
    pub x0_used: Vec<f64>,
    /// Unsquared prediction-error objective at `theta_hat`.
    pub residual_norm: f64,
    pub squared_objective: f64,
    pub convergence: ConvergenceInfo,
    /// Free parameters that ended on a bound.
    pub active_bounds: Vec<String>,
    pub fixed_params: BTreeMap<String, f64>,
    pub starts: Vec<StartResult>,
}

impl EstimationResult {
    /// Two-column table `parameter,true,estimated`; `true` is empty when unknown.
    pub fn table_csv(&self, truth: Option<&ParameterVector>) -> String {
        let mut out = String::from("parameter,true,estimated\n");
        let est = self.theta_hat.to_array();
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            let t = truth.map(|p| format_f64(p.to_array()[i])).unwrap_or_default();
            out.push_str(&format!("{name},{t},{}\n", format_f64(est[i])));
        }
        out
    }
}

struct Layout {
    free: Vec<usize>,
    base: [f64; 9],
    joint_x0: bool,
}

impl Layout {
    fn split(&self, v: &[f64], x0_guess: &[f64]) -> ([f64; 9], Vec<f64>) {
        let mut theta = self.base;
        for (k, &i) in self.free.iter().enumerate() {
            theta[i] = v[k];
        }
        let mut x0 = x0_guess.to_vec();
        if self.joint_x0 {
            let nf = self.free.len();
            x0[0] = v[nf];
            x0[1] = v[nf + 1];
            x0[5] = 1.0 - x0[..5].iter().sum::<f64>();
        }
        (theta, x0)
    }
}

/// Fits the SIDHER parameters to `data` by bounded prediction-error minimization.
pub fn fit_parameters(data: &DataSet, config: &EstimationConfig) -> Result<EstimationResult> {
    config.validate()?;
    data.validate()?;
    if data.n_u() != 4 || data.n_y() != 10 {
        return Err(Error::InvalidInput(format!(
            "SIDHER fitting needs 4 inputs and 10 outputs, data has {} and {}",
            data.n_u(),
            data.n_y()
        )));
    }
    let family = SidherFamily;
    let x0_guess = match &config.x0_policy {
        InitialStatePolicy::Guess => guess_initial_state(data, config.seed),
        InitialStatePolicy::Given { x0 } => x0.clone(),
    };
    let mut base = config.theta_init.to_array();
    for (name, v) in &config.fixed_params {
        base[ParameterVector::index_of(name).expect("validated")] = *v;
    }
    let free: Vec<usize> = (0..9)
        .filter(|&i| !config.fixed_params.contains_key(PARAM_NAMES[i]))
        .collect();
    let mut lower: Vec<f64> = free.iter().map(|&i| config.bound(PARAM_NAMES[i]).0).collect();
    let mut upper: Vec<f64> = free.iter().map(|&i| config.bound(PARAM_NAMES[i]).1).collect();
    if config.estimate_initial_state {
        // Same support as the random initial-state guess.
        lower.extend([S0_RANGE.0, I0_RANGE.0]);
        upper.extend([S0_RANGE.1, I0_RANGE.1]);
    }
    let layout = Layout {
        free: free.clone(),
        base,
        joint_x0: config.estimate_initial_state,
    };
    let control = StepControl::fixed(config.sim_step);
    let weights = trapezoid_weights(&data.times);

    let init_obj = objective_value(&family, data, &base, &x0_guess, &control);
    if !init_obj.finite {
        return Err(Error::Optimization(
            "objective is not finite at the initial parameters".into(),
        ));
    }

    // Start 0 is theta_init; the rest are drawn log-uniformly within bounds.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_df17);
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(config.multistart_count);
    for k in 0..config.multistart_count {
        let mut v: Vec<f64> = free.iter().map(|&i| base[i]).collect();
        if k > 0 {
            for (j, val) in v.iter_mut().enumerate() {
                let lo = lower[j].max(1e-3).min(upper[j]);
                let hi = upper[j];
                *val = if hi > lo {
                    (rng.gen_range(lo.ln()..=hi.ln())).exp()
                } else {
                    hi
                };
            }
        }
        if config.estimate_initial_state {
            if k == 0 {
                v.extend([
                    x0_guess[0].clamp(S0_RANGE.0, S0_RANGE.1),
                    x0_guess[1].clamp(I0_RANGE.0, I0_RANGE.1),
                ]);
            } else {
                v.push(rng.gen_range(S0_RANGE.0..=S0_RANGE.1));
                v.push(rng.gen_range(I0_RANGE.0..=I0_RANGE.1));
            }
        }
        starts.push(v);
    }

    let opts = LsqOptions {
        max_iterations: config.max_iterations,
        gradient_tolerance: config.gradient_tolerance,
        ..LsqOptions::default()
    };
    let outcomes: Vec<Result<LsqOutcome>> = starts
        .par_iter()
        .map(|v0| {
            let f = |v: &[f64]| {
                let (theta, x0) = layout.split(v, &x0_guess);
                weighted_residuals(&family, data, &weights, &theta, &x0, &control)
            };
            bounded_least_squares(f, v0, &lower, &upper, &opts)
        })
        .collect();

    let mut records = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, f64)> = None;
    for (k, (out, v0)) in outcomes.iter().zip(&starts).enumerate() {
        let (init_theta, _) = layout.split(v0, &x0_guess);
        match out {
            Ok(o) => {
                let (theta, x0) = layout.split(&o.x, &x0_guess);
                let obj = objective_value(&family, data, &theta, &x0, &control);
                records.push(StartResult {
                    start: k,
                    theta_init: ParameterVector::from_array(init_theta),
                    theta: Some(ParameterVector::from_array(theta)),
                    x0: Some(x0),
                    objective: obj.value,
                    squared_objective: obj.squared,
                    iterations: o.iterations,
                    termination: Some(o.termination),
                    error: None,
                });
                if obj.finite && best.is_none_or(|(_, b)| obj.squared < b) {
                    best = Some((k, obj.squared));
                }
            }
            Err(e) => records.push(StartResult {
                start: k,
                theta_init: ParameterVector::from_array(init_theta),
                theta: None,
                x0: None,
                objective: f64::INFINITY,
                squared_objective: f64::INFINITY,
                iterations: 0,
                termination: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let (k, _) = best.ok_or_else(|| {
        let reasons: Vec<String> = records
            .iter()
            .map(|r| format!("start {}: {}", r.start, r.error.clone().unwrap_or_default()))
            .collect();
        Error::Optimization(format!("all starts failed: {}", reasons.join("; ")))
    })?;
    let o = outcomes[k].as_ref().expect("best start succeeded");
    let rec = &records[k];
    let active_bounds = free
        .iter()
        .enumerate()
        .filter(|(j, _)| o.at_bound[*j])
        .map(|(_, &i)| PARAM_NAMES[i].to_string())
        .collect();
    Ok(EstimationResult {
        theta_hat: rec.theta.expect("best start succeeded"),
        x0_used: rec.x0.clone().expect("best start succeeded"),
        residual_norm: rec.objective,
        squared_objective: rec.squared_objective,
        convergence: ConvergenceInfo {
            iterations: o.iterations,
            evaluations: o.evaluations,
            termination: o.termination,
            projected_gradient_norm: o.projected_gradient_norm,
        },
        active_bounds,
        fixed_params: config.fixed_params.clone(),
        starts: records,
    })
}

/// Closed-form rates first, then a fit of the remaining parameters with those held fixed.
pub fn estimate_with_closed_form_rates(
    data: &DataSet,
    config: &EstimationConfig,
) -> Result<(ClosedFormRates, EstimationResult)> {
    let rates = closed_form_rates(data)?;
    let mut cfg = config.clone();
    cfg.fixed_params.extend(rates.as_fixed_params());
    let result = fit_parameters(data, &cfg)?;
    Ok((rates, result))
}
