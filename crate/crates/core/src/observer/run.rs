//! Running a designed observer on data, and checks of its error dynamics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ObserverGains;
use crate::error::{Error, Result};
use crate::estimation::guess_initial_state;
use crate::model::StructuredModel;
use crate::sim::{
    csv_row, generate_dataset, integrate, ode, DataSet, InputSignal, NoiseSpec, StepControl, Trajectory,
};

fn mat_vec_add(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for j in 0..m.ncols() {
        let xj = x[j];
        if xj != 0.0 {
            for i in 0..m.nrows() {
                out[i] += m[(i, j)] * xj;
            }
        }
    }
}

/// Observer maps shared by the direct run and the error-system check.
struct ObserverCore<'a> {
    gains: &'a ObserverGains,
    model: &'a StructuredModel,
    /// `ML + J`
    mlj: DMatrix<f64>,
    /// `NĜ`
    ng: DMatrix<f64>,
    cx: Vec<f64>,
    q: Vec<f64>,
}

impl<'a> ObserverCore<'a> {
    fn new(gains: &'a ObserverGains, model: &'a StructuredModel) -> Result<Self> {
        let d = model.dims();
        if gains.model_hash != model.matrix_hash() {
            return Err(Error::InvalidInput(
                "observer gains were designed for a different model".into(),
            ));
        }
        if gains.m.shape() != (d.n_x, d.n_x) || gains.l.shape() != (d.n_x, d.n_y) {
            return Err(Error::dims("observer gain L", d.n_x * d.n_y, gains.l.len()));
        }
        Ok(ObserverCore {
            gains,
            model,
            mlj: &gains.m * &gains.l + &gains.j,
            ng: &gains.n * model.g(),
            cx: vec![0.0; d.n_y],
            q: vec![0.0; d.n_h],
        })
    }

    /// `x̂ = z + Lȳ`
    fn x_hat(&self, z: &[f64], y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(z);
        mat_vec_add(&self.gains.l, y, out);
    }

    /// `f(Hx̂ + K(ȳ − Ĉx̂), ū)`
    fn injected_f(&mut self, x_hat: &[f64], y: &[f64], u: &[f64], out: &mut [f64]) {
        self.cx.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_add(self.model.c(), x_hat, &mut self.cx);
        for (c, yi) in self.cx.iter_mut().zip(y) {
            *c = yi - *c;
        }
        self.q.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_add(self.model.h(), x_hat, &mut self.q);
        mat_vec_add(&self.gains.k, &self.cx, &mut self.q);
        self.model.nonlinearity().eval(&self.q, u, out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub time: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverRun {
    pub times: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
    pub y_hat: Vec<Vec<f64>>,
    /// `x − x̂` when the true trajectory was supplied.
    pub error: Option<Vec<Vec<f64>>>,
    /// Set when integration stopped early; the records above are then partial.
    pub failure: Option<RunFailure>,
}

impl ObserverRun {
    /// Euclidean norm of the estimation error at each recorded time.
    pub fn error_norms(&self) -> Option<Vec<f64>> {
        self.error.as_ref().map(|e| {
            e.iter()
                .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        })
    }

    /// Header `t,z1..,xhat1..,yhat1..[,e1..]`.
    pub fn to_csv(&self) -> String {
        let n_x = self.z.first().map_or(0, |v| v.len());
        let n_y = self.y_hat.first().map_or(0, |v| v.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n_x).map(|i| format!("z{i}")));
        header.extend((1..=n_x).map(|i| format!("xhat{i}")));
        header.extend((1..=n_y).map(|i| format!("yhat{i}")));
        if self.error.is_some() {
            header.extend((1..=n_x).map(|i| format!("e{i}")));
        }
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.z[k]);
            row.extend(&self.x_hat[k]);
            row.extend(&self.y_hat[k]);
            if let Some(e) = &self.error {
                row.extend(&e[k]);
            }
            out.push_str(&csv_row(&row));
        }
        out
    }
}

/// Runs the observer on the records `(ū, ȳ)`, interpolated linearly, from
/// `x̂(t₀) = xhat0`. If integration fails the run is returned up to the last
/// successful sample, with `failure` set.
pub fn run_observer(
    gains: &ObserverGains,
    model_hat: &StructuredModel,
    data: &DataSet,
    xhat0: &[f64],
    truth: Option<&Trajectory>,
    control: &StepControl,
) -> Result<ObserverRun> {
    data.validate()?;
    let d = model_hat.dims();
    if xhat0.len() != d.n_x {
        return Err(Error::dims("observer initial state", d.n_x, xhat0.len()));
    }
    if data.n_u() != d.n_u {
        return Err(Error::dims("data inputs", d.n_u, data.n_u()));
    }
    if data.n_y() != d.n_y {
        return Err(Error::dims("data outputs", d.n_y, data.n_y()));
    }
    if let Some(tr) = truth {
        if tr.times.len() != data.times.len()
            || tr.times.iter().zip(&data.times).any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::InvalidInput(
                "true trajectory must be sampled on the data grid".into(),
            ));
        }
    }
    let mut core = ObserverCore::new(gains, model_hat)?;
    let usig = data.input_signal();
    let ysig = data.output_signal();
    let mut u = vec![0.0; d.n_u];
    let mut y = vec![0.0; d.n_y];
    let mut xh = vec![0.0; d.n_x];
    let mut fv = vec![0.0; d.n_f];

    // z₀ = x̂₀ − Lȳ(t₀)
    let mut z0 = xhat0.to_vec();
    let neg_l = -&gains.l;
    mat_vec_add(&neg_l, &data.y_bar[0], &mut z0);

    let mut zs = vec![z0];
    let mut failure = None;
    for w in data.times.windows(2) {
        let seg = [w[0], w[1]];
        let z_start = zs.last().unwrap().clone();
        let res = ode::solve(
            |t, piece, z, dz| {
                let k = ysig.interval(piece);
                usig.eval_in_interval(k, t, &mut u);
                ysig.eval_in_interval(k, t, &mut y);
                core.x_hat(z, &y, &mut xh);
                core.injected_f(&xh, &y, &u, &mut fv);
                dz.iter_mut().for_each(|v| *v = 0.0);
                mat_vec_add(&core.gains.m, z, dz);
                mat_vec_add(&core.mlj, &y, dz);
                mat_vec_add(&core.ng, &fv, dz);
            },
            &z_start,
            &seg,
            &[],
            control,
        );
        match res {
            Ok((states, _)) if states[1].iter().all(|v| v.is_finite()) => {
                zs.push(states[1].clone())
            }
            Ok(_) => {
                failure = Some(RunFailure {
                    time: w[0],
                    reason: "observer state became non-finite".into(),
                });
                break;
            }
            Err(e) => {
                failure = Some(RunFailure {
                    time: w[0],
                    reason: e.to_string(),
                });
                break;
            }
        }
    }

    let n = zs.len();
    let times = data.times[..n].to_vec();
    let x_hat: Vec<Vec<f64>> = zs
        .iter()
        .zip(&data.y_bar)
        .map(|(z, yk)| {
            let mut x = vec![0.0; d.n_x];
            core.x_hat(z, yk, &mut x);
            x
        })
        .collect();
    let y_hat = x_hat
        .iter()
        .map(|x| {
            let mut yk = vec![0.0; d.n_y];
            model_hat.output_into(x, &mut yk);
            yk
        })
        .collect();
    let error = truth.map(|tr| {
        tr.states[..n]
            .iter()
            .zip(&x_hat)
            .map(|(x, xh)| x.iter().zip(xh).map(|(a, b)| a - b).collect())
            .collect()
    });
    Ok(ObserverRun {
        times,
        z: zs,
        x_hat,
        y_hat,
        error,
        failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub times: Vec<f64>,
    /// `max_k ‖(x − x̂)(t_k) − (η − Lv)(t_k)‖_∞`
    pub max_discrepancy: f64,
    pub max_error_norm: f64,
}

/// Compares the directly simulated estimation error with the one obtained by
/// integrating the error dynamics
///
/// ```text
/// η̇ = Mη + NĜ f̃ + Nw − (ML + J)v,   e = η − Lv,   η = Nx − z
/// ```
///
/// alongside the true system, where `w` and `v` are the disturbances that make
/// the estimated model reproduce the true trajectory and the recorded data.
#[allow(clippy::too_many_arguments)]
pub fn error_system_check(
    gains: &ObserverGains,
    model_hat: &StructuredModel,
    true_model: &StructuredModel,
    true_input: &dyn InputSignal,
    x0_true: &[f64],
    data: &DataSet,
    xhat0: &[f64],
    control: &StepControl,
) -> Result<EquivalenceReport> {
    let d = model_hat.dims();
    if true_model.dims() != d {
        return Err(Error::InvalidInput(
            "true and estimated models must have the same dimensions".into(),
        ));
    }
    let truth = integrate(true_model, x0_true, true_input, &data.times, control)?;
    let run = run_observer(gains, model_hat, data, xhat0, Some(&truth), control)?;
    if let Some(f) = &run.failure {
        return Err(Error::Integration {
            last_time: f.time,
            reason: f.reason.clone(),
        });
    }

    let mut core = ObserverCore::new(gains, model_hat)?;
    let usig = data.input_signal();
    let ysig = data.output_signal();
    let n = d.n_x;
    let mut bps = true_input.breakpoints(data.start(), data.end());
    bps.retain(|t| !data.times.iter().any(|s| (s - t).abs() < 1e-12));

    // η₀ = N x₀ − z₀ with z₀ = x̂₀ − Lȳ(t₀).
    let mut z0 = xhat0.to_vec();
    mat_vec_add(&(-&gains.l), &data.y_bar[0], &mut z0);
    let mut eta0 = vec![0.0; n];
    mat_vec_add(&gains.n, x0_true, &mut eta0);
    for (e, z) in eta0.iter_mut().zip(&z0) {
        *e -= z;
    }
    let mut s0 = x0_true.to_vec();
    s0.extend(eta0);

    let mut ws = true_model.scratch();
    let mut u = vec![0.0; d.n_u];
    let mut ub = vec![0.0; d.n_u];
    let mut yb = vec![0.0; d.n_y];
    let mut hx = vec![0.0; d.n_h];
    let mut f_true = vec![0.0; d.n_f];
    let mut f_obs = vec![0.0; d.n_f];
    let mut w = vec![0.0; n];
    let mut v = vec![0.0; d.n_y];
    let mut xh = vec![0.0; n];
    let mut ftil = vec![0.0; d.n_f];
    let mut lin = vec![0.0; n];
    let mut neg_v = vec![0.0; d.n_y];
    let (states, _) = ode::solve(
        |t, piece, s, ds| {
            let (x, eta) = s.split_at(n);
            let (dx, deta) = ds.split_at_mut(n);
            true_input.eval_piece(t, piece, &mut u);
            let k = ysig.interval(piece);
            usig.eval_in_interval(k, t, &mut ub);
            ysig.eval_in_interval(k, t, &mut yb);
            true_model.rhs_into(x, &u, dx, &mut ws);
            // w = ẋ − Âx − Ĝ f(Hx, ū)
            hx.iter_mut().for_each(|q| *q = 0.0);
            mat_vec_add(model_hat.h(), x, &mut hx);
            model_hat.nonlinearity().eval(&hx, &ub, &mut f_true);
            w.copy_from_slice(dx);
            model_hat.lin_plus_g(x, &f_true, &mut lin);
            for (wi, li) in w.iter_mut().zip(&lin) {
                *wi -= li;
            }
            // v = ȳ − Ĉx
            model_hat.output_into(x, &mut v);
            for (vi, yi) in v.iter_mut().zip(&yb) {
                *vi = yi - *vi;
            }
            // x̂ = x − e with e = η − Lv
            for i in 0..n {
                xh[i] = x[i] - eta[i];
            }
            mat_vec_add(&core.gains.l, &v, &mut xh);
            core.injected_f(&xh, &yb, &ub, &mut f_obs);
            for ((ft, a), b) in ftil.iter_mut().zip(&f_true).zip(&f_obs) {
                *ft = a - b;
            }
            deta.iter_mut().for_each(|q| *q = 0.0);
            mat_vec_add(&core.gains.m, eta, deta);
            mat_vec_add(&core.ng, &ftil, deta);
            mat_vec_add(&core.gains.n, &w, deta);
            for (nv, vi) in neg_v.iter_mut().zip(&v) {
                *nv = -vi;
            }
            mat_vec_add(&core.mlj, &neg_v, deta);
        },
        &s0,
        &data.times,
        &bps,
        control,
    )?;

    let direct = run.error.expect("truth was supplied");
    let mut max_discrepancy: f64 = 0.0;
    let mut max_error_norm: f64 = 0.0;
    for (k, s) in states.iter().enumerate() {
        let (x, eta) = s.split_at(n);
        let mut vk = vec![0.0; d.n_y];
        model_hat.output_into(x, &mut vk);
        for (vi, yi) in vk.iter_mut().zip(&data.y_bar[k]) {
            *vi = yi - *vi;
        }
        let mut e = eta.to_vec();
        mat_vec_add(&(-&gains.l), &vk, &mut e);
        for i in 0..n {
            max_discrepancy = max_discrepancy.max((direct[k][i] - e[i]).abs());
        }
        let norm = direct[k].iter().map(|q| q * q).sum::<f64>().sqrt();
        max_error_norm = max_error_norm.max(norm);
    }
    Ok(EquivalenceReport {
        times: data.times.clone(),
        max_discrepancy,
        max_error_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssSample {
    pub noise_std: f64,
    pub seed: u64,
    pub horizon: f64,
    pub initial_error: f64,
    pub terminal_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssReport {
    pub horizons: Vec<f64>,
    /// Median over seeds of the noise-free terminal error at each horizon.
    pub zero_noise_terminal: Vec<f64>,
    pub zero_noise_initial: f64,
    pub strictly_decreasing_in_horizon: bool,
    pub noise_levels: Vec<f64>,
    /// Median terminal error at the longest horizon for each noise level.
    pub median_terminal: Vec<f64>,
    pub nondecreasing_in_noise: bool,
    /// Spearman correlation of noise level and terminal error over all
    /// samples at the longest horizon (ties get average ranks).
    pub rank_correlation: f64,
    /// Same correlation computed on the per-level medians.
    pub median_rank_correlation: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; NaN when either variable is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

pub fn iss_decay_metrics(samples: &[IssSample]) -> Result<IssReport> {
    let mut horizons: Vec<f64> = samples.iter().map(|s| s.horizon).collect();
    horizons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    horizons.dedup();
    let mut levels: Vec<f64> = samples.iter().map(|s| s.noise_std).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    if levels.len() < 2 || levels[0] != 0.0 {
        return Err(Error::InvalidInput(
            "need at least two noise levels including zero".into(),
        ));
    }
    let t_max = *horizons.last().unwrap();

    let zero_noise_terminal: Vec<f64> = horizons
        .iter()
        .map(|&h| {
            let mut v: Vec<f64> = samples
                .iter()
                .filter(|s| s.noise_std == 0.0 && s.horizon == h)
                .map(|s| s.terminal_error)
                .collect();
            median(&mut v)
        })
        .collect();
    let mut init: Vec<f64> = samples
        .iter()
        .filter(|s| s.noise_std == 0.0)
        .map(|s| s.initial_error)
        .collect();
    let zero_noise_initial = median(&mut init);
    let strictly_decreasing_in_horizon = zero_noise_terminal[0] < zero_noise_initial
        && zero_noise_terminal.windows(2).all(|w| w[1] < w[0]);

    let last: Vec<&IssSample> = samples.iter().filter(|s| s.horizon == t_max).collect();
    let median_terminal: Vec<f64> = levels
        .iter()
        .map(|&l| {
            let mut v: Vec<f64> = last
                .iter()
                .filter(|s| s.noise_std == l)
                .map(|s| s.terminal_error)
                .collect();
            median(&mut v)
        })
        .collect();
    let nondecreasing_in_noise = median_terminal.windows(2).all(|w| w[1] >= w[0]);
    let xs: Vec<f64> = last.iter().map(|s| s.noise_std).collect();
    let ys: Vec<f64> = last.iter().map(|s| s.terminal_error).collect();
    Ok(IssReport {
        horizons,
        zero_noise_terminal,
        zero_noise_initial,
        strictly_decreasing_in_horizon,
        rank_correlation: spearman(&xs, &ys),
        median_rank_correlation: spearman(&levels, &median_terminal),
        noise_levels: levels,
        median_terminal,
        nondecreasing_in_noise,
    })
}

/// Runs the observer on data simulated from the true model for every
/// (noise level, seed) pair and records the error at each horizon.
/// Noise of the given standard deviation is added to both ū and ȳ, and the
/// observer starts from the initial-state guess for that seed.
#[allow(clippy::too_many_arguments)]
pub fn iss_experiment(
    gains: &ObserverGains,
    model_hat: &StructuredModel,
    true_model: &StructuredModel,
    true_input: &dyn InputSignal,
    x0_true: &[f64],
    noise_levels: &[f64],
    seeds: &[u64],
    horizons: &[f64],
    sample_dt: f64,
    control: &StepControl,
) -> Result<Vec<IssSample>> {
    let t_max = horizons.iter().cloned().fold(0.0, f64::max);
    if !(t_max > 0.0) {
        return Err(Error::InvalidInput("horizons must be positive".into()));
    }
    let jobs: Vec<(f64, u64)> = noise_levels
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let runs: Vec<Result<Vec<IssSample>>> = jobs
        .par_iter()
        .map(|&(level, seed)| {
            let noise = NoiseSpec::uniform(level, level, seed);
            let (data, truth) =
                generate_dataset(true_model, x0_true, true_input, 0.0, t_max, sample_dt, &noise, control)?;
            let xhat0 = guess_initial_state(&data, seed);
            let run = run_observer(gains, model_hat, &data, &xhat0, Some(&truth), control)?;
            let norms = run.error_norms().expect("truth was supplied");
            horizons
                .iter()
                .map(|&h| {
                    let k = data.times.partition_point(|&t| t <= h + 1e-9);
                    if k == 0 || k > norms.len() {
                        return Err(Error::Integration {
                            last_time: run.times.last().cloned().unwrap_or(0.0),
                            reason: run
                                .failure
                                .as_ref()
                                .map_or("horizon not reached".into(), |f| f.reason.clone()),
                        });
                    }
                    Ok(IssSample {
                        noise_std: level,
                        seed,
                        horizon: h,
                        initial_error: norms[0],
                        terminal_error: norms[k - 1],
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in runs {
        out.extend(r?);
    }
    Ok(out)
}

/// Least-squares fit of `ln e(t) ≈ a − λt` over samples with `e > 0`.
/// Returns `(λ, a, r²)`.
pub fn fit_exponential_decay(times: &[f64], errors: &[f64]) -> Result<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(t, e)| (*t, e.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidInput("need two positive errors to fit a decay".into()));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stl: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sll: f64 = pts.iter().map(|p| (p.1 - ml).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::InvalidInput("decay fit needs distinct times".into()));
    }
    let slope = stl / stt;
    let r2 = if sll == 0.0 { 1.0 } else { stl * stl / (stt * sll) };
    Ok((-slope, ml - slope * mt, r2))
}
