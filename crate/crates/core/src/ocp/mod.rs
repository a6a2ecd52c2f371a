//! Finite-horizon optimal control with piecewise-constant inputs.
//!
//! ```text
//! min  ∫ xᵀΓx + uᵀΛu dt   s.t.  ẋ = Âx + Ĝf(Hx, u),  u ∈ [u_min, u_max],
//!                              x_i(t) ≤ x̄_i on the constraint grid
//! ```
//!
//! The input is held constant over `n_periods` periods, so the decision vector
//! has `n_periods · n_u` entries. The problem is solved by single shooting:
//! the cost gradient and the constraint Jacobian come from the forward
//! sensitivity equations, and a sequential quadratic programming loop with a
//! damped BFGS Hessian, elastic ℓ∞ subproblems and an ℓ∞ merit function
//! drives the iterates.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sidher_input_bounds, StructuredModel};
use crate::sim::{csv_row, integrate, ode, InputSignal, PiecewiseConstant, StepControl, Trajectory};
use qp::{solve_qp, QpOptions, QpStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLimit {
    pub name: String,
    pub state: usize,
    pub limit: f64,
}

#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub model_hat: StructuredModel,
    pub x_init: Vec<f64>,
    pub t_start: f64,
    pub period_length: f64,
    pub n_periods: usize,
    /// Diagonal of Γ.
    pub gamma: Vec<f64>,
    /// Diagonal of Λ.
    pub lambda: Vec<f64>,
    pub input_bounds: Vec<(f64, f64)>,
    pub path_limits: Vec<PathLimit>,
    pub constraint_grid_dt: f64,
    pub control: StepControl,
}

impl OcpSpec {
    /// Five 14-day periods; Γ = diag(0.01, 1, 0, 2, 10, 0), Λ = 0.01·I;
    /// I ≤ 0.5, H ≤ 0.05, E ≤ 0.005.
    pub fn sidher(model_hat: StructuredModel, x_init: Vec<f64>, t_start: f64) -> Self {
        let limit = |name: &str, state, limit| PathLimit {
            name: name.into(),
            state,
            limit,
        };
        OcpSpec {
            model_hat,
            x_init,
            t_start,
            period_length: 14.0,
            n_periods: 5,
            gamma: vec![0.01, 1.0, 0.0, 2.0, 10.0, 0.0],
            lambda: vec![0.01; 4],
            input_bounds: sidher_input_bounds(),
            path_limits: vec![
                limit("I", 1, 0.5),
                limit("H", 3, 0.05),
                limit("E", 4, 0.005),
            ],
            constraint_grid_dt: 0.5,
            control: StepControl::fixed(0.05),
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.n_periods as f64 * self.period_length
    }

    pub fn n_u(&self) -> usize {
        self.input_bounds.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_periods * self.n_u()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_hat.dims();
        if self.x_init.len() != d.n_x {
            return Err(Error::dims("x_init", d.n_x, self.x_init.len()));
        }
        if self.gamma.len() != d.n_x {
            return Err(Error::dims("Γ diagonal", d.n_x, self.gamma.len()));
        }
        if self.lambda.len() != d.n_u {
            return Err(Error::dims("Λ diagonal", d.n_u, self.lambda.len()));
        }
        if self.input_bounds.len() != d.n_u {
            return Err(Error::dims("input bounds", d.n_u, self.input_bounds.len()));
        }
        let bad = |field: &str, reason: &str| {
            Err(Error::InvalidParameter {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return bad("gamma", "entries must be nonnegative");
        }
        if self.lambda.iter().any(|l| !(*l > 0.0)) {
            return bad("lambda", "entries must be positive");
        }
        if self.input_bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
            return bad("input_bounds", "lower bound exceeds upper bound");
        }
        if !(self.period_length > 0.0) {
            return bad("period_length", "must be positive");
        }
        if !(self.constraint_grid_dt > 0.0) {
            return bad("constraint_grid_dt", "must be positive");
        }
        for l in &self.path_limits {
            if l.state >= d.n_x {
                return bad("path_limits", "state index out of range");
            }
            if !(l.limit > 0.0 && l.limit <= 1.0) {
                return bad("path_limits", "limits must lie in (0, 1]");
            }
        }
        Ok(())
    }

    /// Period boundaries `t_start, t_start + T, …, t_end`.
    pub fn period_edges(&self) -> Vec<f64> {
        (0..=self.n_periods)
            .map(|p| self.t_start + p as f64 * self.period_length)
            .collect()
    }

    /// Constraint grid merged with the period boundaries.
    pub fn grid(&self) -> Vec<f64> {
        let (t0, t1) = (self.t_start, self.t_end());
        if self.n_periods == 0 {
            return vec![t0];
        }
        let n = ((t1 - t0) / self.constraint_grid_dt).round() as usize;
        let mut g: Vec<f64> = (0..=n)
            .map(|k| t0 + k as f64 * self.constraint_grid_dt)
            .filter(|t| *t < t1)
            .collect();
        g.extend(self.period_edges());
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        g.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        g
    }

    pub fn lower(&self) -> Vec<f64> {
        (0..self.n_periods)
            .flat_map(|_| self.input_bounds.iter().map(|b| b.0))
            .collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        (0..self.n_periods)
            .flat_map(|_| self.input_bounds.iter().map(|b| b.1))
            .collect()
    }

    pub fn policy(&self, flat: &[f64]) -> ControlPolicy {
        let n_u = self.n_u();
        ControlPolicy {
            breakpoints: self.period_edges()[..self.n_periods].to_vec(),
            values: flat.chunks(n_u).map(|c| c.to_vec()).collect(),
            end: self.t_end(),
        }
    }

    /// The same values in every period.
    pub fn constant(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n_periods).flat_map(|_| u.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicy {
    /// Period start times.
    pub breakpoints: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub end: f64,
}

impl ControlPolicy {
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().cloned().collect()
    }

    pub fn signal(&self) -> PiecewiseConstant {
        PiecewiseConstant {
            starts: self.breakpoints.clone(),
            values: self.values.clone(),
        }
    }

    /// Header `period_start,u1..`.
    pub fn to_csv(&self) -> String {
        let n_u = self.values.first().map_or(0, |v| v.len());
        let mut header = vec!["period_start".to_string()];
        header.extend((1..=n_u).map(|i| format!("u{i}")));
        let mut out = header.join(",");
        out.push('\n');
        for (t, v) in self.breakpoints.iter().zip(&self.values) {
            let mut row = vec![*t];
            row.extend(v);
            out.push_str(&csv_row(&row));
        }
        out
    }
}

fn quad(diag: &[f64], v: &[f64]) -> f64 {
    diag.iter().zip(v).map(|(d, x)| d * x * x).sum()
}

/// Trapezoid weights of the grid nodes inside each period, as `(node, period, weight)`.
fn period_weights(times: &[f64], edges: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for p in 0..edges.len().saturating_sub(1) {
        let (a, b) = (edges[p], edges[p + 1]);
        let find = |t: f64| times.iter().position(|s| (s - t).abs() <= 1e-9);
        let (ia, ib) = match (find(a), find(b)) {
            (Some(ia), Some(ib)) => (ia, ib),
            _ => {
                return Err(Error::InvalidInput(
                    "trajectory grid must contain every period boundary".into(),
                ))
            }
        };
        for k in ia..ib {
            let h = 0.5 * (times[k + 1] - times[k]);
            out.push((k, p, h));
            out.push((k + 1, p, h));
        }
    }
    Ok(out)
}

/// Trapezoid value of `∫ xᵀΓx + uᵀΛu dt` over the policy horizon; each period
/// is integrated separately with its own input value.
pub fn evaluate_cost(
    traj: &Trajectory,
    policy: &ControlPolicy,
    gamma: &[f64],
    lambda: &[f64],
) -> Result<f64> {
    if policy.values.is_empty() {
        return Ok(0.0);
    }
    let mut edges = policy.breakpoints.clone();
    edges.push(policy.end);
    let mut cost = 0.0;
    for (k, p, w) in period_weights(&traj.times, &edges)? {
        cost += w * (quad(gamma, &traj.states[k]) + quad(lambda, &policy.values[p]));
    }
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitMargin {
    pub name: String,
    pub limit: f64,
    pub max_value: f64,
    /// `limit − max value`.
    pub margin: f64,
    /// First grid time where the margin is below `−tol`.
    pub first_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub limits: Vec<LimitMargin>,
    pub feasible: bool,
}

impl ConstraintReport {
    pub fn worst_margin(&self) -> f64 {
        self.limits.iter().map(|l| l.margin).fold(f64::INFINITY, f64::min)
    }
}

pub fn check_constraints(traj: &Trajectory, limits: &[PathLimit], tol: f64) -> ConstraintReport {
    let limits: Vec<LimitMargin> = limits
        .iter()
        .map(|l| {
            let (max_value, _) = traj.state_max(l.state);
            let first_violation = traj
                .times
                .iter()
                .zip(&traj.states)
                .find(|(_, x)| l.limit - x[l.state] < -tol)
                .map(|(t, _)| *t);
            LimitMargin {
                name: l.name.clone(),
                limit: l.limit,
                max_value,
                margin: l.limit - max_value,
                first_violation,
            }
        })
        .collect();
    let feasible = limits.iter().all(|l| l.first_violation.is_none());
    ConstraintReport { limits, feasible }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShootResult {
    /// `None` when integration failed.
    pub trajectory: Option<Trajectory>,
    /// `+∞` when integration failed.
    pub cost: f64,
    /// `x_i(t_k) − x̄_i` for every grid time after `t_start`, limits fastest.
    pub constraints: Vec<f64>,
    /// Some control was outside its bounds and was clamped.
    pub clamped: bool,
    pub failure: Option<String>,
}

impl ShootResult {
    pub fn max_violation(&self) -> f64 {
        self.constraints.iter().cloned().fold(0.0, f64::max)
    }
}

fn clamp_controls(spec: &OcpSpec, flat: &[f64]) -> Result<(Vec<f64>, bool)> {
    if flat.len() != spec.n_vars() {
        return Err(Error::dims("control vector", spec.n_vars(), flat.len()));
    }
    let (lo, hi) = (spec.lower(), spec.upper());
    let mut clamped = false;
    let v = flat
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = x.clamp(lo[i], hi[i]);
            clamped |= c != *x;
            c
        })
        .collect();
    Ok((v, clamped))
}

fn constraint_values(spec: &OcpSpec, traj: &Trajectory) -> Vec<f64> {
    traj.states[1..]
        .iter()
        .flat_map(|x| spec.path_limits.iter().map(move |l| x[l.state] - l.limit))
        .collect()
}

/// Simulates the policy `flat` from `x_init` on the grid, returning cost and
/// path-constraint values. Controls outside their bounds are clamped.
pub fn shoot(spec: &OcpSpec, flat: &[f64]) -> Result<ShootResult> {
    spec.validate()?;
    let (v, clamped) = clamp_controls(spec, flat)?;
    let policy = spec.policy(&v);
    if spec.n_periods == 0 {
        return Ok(ShootResult {
            trajectory: None,
            cost: 0.0,
            constraints: Vec::new(),
            clamped,
            failure: None,
        });
    }
    let grid = spec.grid();
    match integrate(&spec.model_hat, &spec.x_init, &policy.signal(), &grid, &spec.control) {
        Ok(traj) if traj.states.iter().flatten().all(|x| x.is_finite()) => {
            let cost = evaluate_cost(&traj, &policy, &spec.gamma, &spec.lambda)?;
            let constraints = constraint_values(spec, &traj);
            Ok(ShootResult {
                trajectory: Some(traj),
                cost,
                constraints,
                clamped,
                failure: None,
            })
        }
        Ok(_) => Ok(failed_shot(spec, clamped, "non-finite state".into())),
        Err(e) => Ok(failed_shot(spec, clamped, e.to_string())),
    }
}

fn failed_shot(spec: &OcpSpec, clamped: bool, reason: String) -> ShootResult {
    let m = (spec.grid().len() - 1) * spec.path_limits.len();
    ShootResult {
        trajectory: None,
        cost: f64::INFINITY,
        constraints: vec![f64::INFINITY; m],
        clamped,
        failure: Some(reason),
    }
}

#[derive(Debug, Clone)]
pub struct ShootDerivatives {
    pub shot: ShootResult,
    pub gradient: Vec<f64>,
    /// Rows follow `ShootResult::constraints`.
    pub jacobian: DMatrix<f64>,
}

/// `shoot` together with exact first derivatives from the forward sensitivity
/// system `Ṡ = (Â + Ĝ ∂f/∂(Hx) H) S + Ĝ ∂f/∂u E(t)`, `S(t_start) = 0`.
pub fn shoot_with_derivatives(spec: &OcpSpec, flat: &[f64]) -> Result<ShootDerivatives> {
    spec.validate()?;
    let (v, clamped) = clamp_controls(spec, flat)?;
    let m = spec.model_hat.clone();
    let d = m.dims();
    let (n_x, n_u, n_v) = (d.n_x, d.n_u, spec.n_vars());
    let grid = spec.grid();
    let n_c = (grid.len() - 1) * spec.path_limits.len();
    if spec.n_periods == 0 {
        return Ok(ShootDerivatives {
            shot: shoot(spec, flat)?,
            gradient: Vec::new(),
            jacobian: DMatrix::zeros(0, 0),
        });
    }
    let policy = spec.policy(&v);
    let signal = policy.signal();
    let edges = spec.period_edges();
    let (a, g, h) = (m.a().clone(), m.g().clone(), m.h().clone());
    let f = m.nonlinearity().clone();
    let mut ws = m.scratch();
    let mut u = vec![0.0; n_u];
    let mut hx = vec![0.0; d.n_h];
    let mut jf = vec![0.0; d.n_f * d.n_h];
    let mut ju = vec![0.0; d.n_f * n_u];
    let mut hs = vec![0.0; d.n_h];
    let mut w = vec![0.0; d.n_f];

    let mut z0 = spec.x_init.clone();
    z0.resize(n_x * (1 + n_v), 0.0);
    let solved = ode::solve(
        |t, piece, z, dz| {
            let (x, sens) = z.split_at(n_x);
            let (dx, dsens) = dz.split_at_mut(n_x);
            signal.eval_piece(t, piece, &mut u);
            m.rhs_into(x, &u, dx, &mut ws);
            for i in 0..d.n_h {
                hx[i] = (0..n_x).map(|j| h[(i, j)] * x[j]).sum();
            }
            f.jacobian(&hx, &u, &mut jf);
            f.input_jacobian(&hx, &u, &mut ju);
            let period = edges[1..].partition_point(|&e| e <= piece).min(spec.n_periods - 1);
            let active = (period + 1) * n_u;
            dsens.fill(0.0);
            for c in 0..active {
                let s = &sens[c * n_x..(c + 1) * n_x];
                for i in 0..d.n_h {
                    hs[i] = (0..n_x).map(|j| h[(i, j)] * s[j]).sum();
                }
                for i in 0..d.n_f {
                    w[i] = (0..d.n_h).map(|j| jf[i * d.n_h + j] * hs[j]).sum();
                }
                if c >= period * n_u {
                    let k = c - period * n_u;
                    for i in 0..d.n_f {
                        w[i] += ju[i * n_u + k];
                    }
                }
                let ds = &mut dsens[c * n_x..(c + 1) * n_x];
                for i in 0..n_x {
                    let mut acc = 0.0;
                    for j in 0..n_x {
                        acc += a[(i, j)] * s[j];
                    }
                    for j in 0..d.n_f {
                        acc += g[(i, j)] * w[j];
                    }
                    ds[i] = acc;
                }
            }
        },
        &z0,
        &grid,
        &[],
        &spec.control,
    );
    let states = match solved {
        Ok((s, _)) if s.iter().flatten().all(|x| x.is_finite()) => s,
        Ok(_) => {
            return Ok(ShootDerivatives {
                shot: failed_shot(spec, clamped, "non-finite state".into()),
                gradient: vec![f64::NAN; n_v],
                jacobian: DMatrix::from_element(n_c, n_v, f64::NAN),
            })
        }
        Err(e) => {
            return Ok(ShootDerivatives {
                shot: failed_shot(spec, clamped, e.to_string()),
                gradient: vec![f64::NAN; n_v],
                jacobian: DMatrix::from_element(n_c, n_v, f64::NAN),
            })
        }
    };

    let xs: Vec<Vec<f64>> = states.iter().map(|z| z[..n_x].to_vec()).collect();
    let traj = Trajectory {
        times: grid.clone(),
        outputs: xs
            .iter()
            .map(|x| {
                let mut y = vec![0.0; d.n_y];
                m.output_into(x, &mut y);
                y
            })
            .collect(),
        inputs: grid.iter().map(|&t| signal.value(t)).collect(),
        states: xs,
    };
    let cost = evaluate_cost(&traj, &policy, &spec.gamma, &spec.lambda)?;
    let mut gradient = vec![0.0; n_v];
    for (k, p, wgt) in period_weights(&grid, &edges)? {
        let x = &traj.states[k];
        let sens = &states[k][n_x..];
        for c in 0..n_v {
            let s = &sens[c * n_x..(c + 1) * n_x];
            let mut acc = 0.0;
            for i in 0..n_x {
                acc += 2.0 * spec.gamma[i] * x[i] * s[i];
            }
            gradient[c] += wgt * acc;
        }
        for j in 0..n_u {
            gradient[p * n_u + j] += wgt * 2.0 * spec.lambda[j] * policy.values[p][j];
        }
    }
    let n_l = spec.path_limits.len();
    let mut jacobian = DMatrix::zeros(n_c, n_v);
    for k in 1..grid.len() {
        let sens = &states[k][n_x..];
        for (j, l) in spec.path_limits.iter().enumerate() {
            for c in 0..n_v {
                jacobian[((k - 1) * n_l + j, c)] = sens[c * n_x + l.state];
            }
        }
    }
    let constraints = constraint_values(spec, &traj);
    Ok(ShootDerivatives {
        shot: ShootResult {
            trajectory: Some(traj),
            cost,
            constraints,
            clamped,
            failure: None,
        },
        gradient,
        jacobian,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub internal: Vec<f64>,
    pub finite_difference: Vec<f64>,
    /// `‖g_fd − g‖∞ / ‖g‖∞`.
    pub relative_error: f64,
}

/// Compares the sensitivity gradient of the cost with central differences
/// (relative step `rel_step`, one-sided at a bound), columns in parallel.
pub fn gradient_check(spec: &OcpSpec, flat: &[f64], rel_step: f64) -> Result<GradientCheck> {
    let (v, _) = clamp_controls(spec, flat)?;
    let der = shoot_with_derivatives(spec, &v)?;
    let (lo, hi) = (spec.lower(), spec.upper());
    let fd: Vec<Result<f64>> = (0..v.len())
        .into_par_iter()
        .map(|j| {
            let h = rel_step * v[j].abs().max(1e-2);
            let (a, b) = ((v[j] - h).max(lo[j]), (v[j] + h).min(hi[j]));
            let mut vp = v.clone();
            vp[j] = b;
            let fp = shoot(spec, &vp)?.cost;
            vp[j] = a;
            let fm = shoot(spec, &vp)?.cost;
            Ok((fp - fm) / (b - a))
        })
        .collect();
    let fd = fd.into_iter().collect::<Result<Vec<f64>>>()?;
    let scale = der.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let diff = der
        .gradient
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(GradientCheck {
        internal: der.gradient,
        finite_difference: fd,
        relative_error: if scale > 0.0 { diff / scale } else { diff },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpOptions {
    pub max_iterations: usize,
    /// Stationarity and complementarity tolerance.
    pub kkt_tolerance: f64,
    /// Allowed path-constraint violation (absolute, state fractions).
    pub feasibility_tolerance: f64,
    /// Largest control change of the final step.
    pub control_tolerance: f64,
    /// Steps shorter than this end the iteration.
    pub step_tolerance: f64,
}

impl Default for OcpOptions {
    fn default() -> Self {
        OcpOptions {
            max_iterations: 200,
            kkt_tolerance: 1e-6,
            feasibility_tolerance: 1e-6,
            control_tolerance: 1e-7,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OcpStatus {
    Optimal,
    /// Best point found when the iteration limit was hit.
    MaxIterations,
    /// Stalled at a point that violates the named constraint.
    Infeasible { constraint: String, violation: f64 },
    /// The merit function could not be decreased along the search direction.
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub status: OcpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub shots: usize,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    pub policy: ControlPolicy,
    pub predicted: Trajectory,
    pub cost: f64,
    pub constraint_report: ConstraintReport,
    pub solver: SolverInfo,
    pub initial_guess: ControlPolicy,
    pub initial_cost: f64,
}

/// Mid-range controls; if those violate a path limit, `u₁` is raised by
/// bisection toward its upper bound to the smallest value that restores
/// feasibility. When even `u₁` at its bound is infeasible, `u₂` is also set
/// to its upper bound and the bisection repeated.
pub fn initial_guess(spec: &OcpSpec, feasibility_tol: f64) -> Result<Vec<f64>> {
    let mid: Vec<f64> = spec.input_bounds.iter().map(|(a, b)| 0.5 * (a + b)).collect();
    let feasible = |u: &[f64]| -> Result<bool> {
        let s = shoot(spec, &spec.constant(u))?;
        Ok(s.failure.is_none() && s.max_violation() <= feasibility_tol)
    };
    if spec.n_periods == 0 || feasible(&mid)? {
        return Ok(spec.constant(&mid));
    }
    let mut base = mid.clone();
    for raise in [None, Some(1usize)] {
        if let Some(ch) = raise {
            if ch >= base.len() {
                break;
            }
            base[ch] = spec.input_bounds[ch].1;
        }
        let mut top = base.clone();
        top[0] = spec.input_bounds[0].1;
        if !feasible(&top)? {
            continue;
        }
        let (mut lo, mut hi) = (base[0], top[0]);
        for _ in 0..40 {
            let m = 0.5 * (lo + hi);
            let mut u = base.clone();
            u[0] = m;
            if feasible(&u)? {
                hi = m;
            } else {
                lo = m;
            }
        }
        let mut u = base;
        u[0] = hi;
        return Ok(spec.constant(&u));
    }
    let mut u = base;
    u[0] = spec.input_bounds[0].1;
    Ok(spec.constant(&u))
}

struct Iterate {
    v: Vec<f64>,
    der: ShootDerivatives,
}

impl Iterate {
    fn violation(&self) -> f64 {
        self.der.shot.max_violation()
    }
}

fn merit(shot: &ShootResult, rho: f64) -> f64 {
    shot.cost + rho * shot.max_violation()
}

struct Subproblem {
    d: Vec<f64>,
    tau: f64,
    lambda_c: Vec<f64>,
    lambda_ub: Vec<f64>,
    lambda_lb: Vec<f64>,
}

/// `min gᵀd + ½dᵀBd + ρτ  s.t.  c + Jd ≤ τ, τ ≥ 0, lb ≤ v + d ≤ ub`.
#[allow(clippy::too_many_arguments)]
fn elastic_qp(
    b: &DMatrix<f64>,
    g: &[f64],
    c: &[f64],
    jac: &DMatrix<f64>,
    v: &[f64],
    lo: &[f64],
    hi: &[f64],
    rho: f64,
) -> Result<Subproblem> {
    let n = v.len();
    let m = c.len();
    let rows = m + 2 * n + 1;
    let mut q = DMatrix::zeros(n + 1, n + 1);
    q.view_mut((0, 0), (n, n)).copy_from(b);
    let mut lin = DVector::zeros(n + 1);
    for j in 0..n {
        lin[j] = g[j];
    }
    lin[n] = rho;
    let mut a = DMatrix::zeros(rows, n + 1);
    let mut rhs = DVector::zeros(rows);
    for i in 0..m {
        for j in 0..n {
            a[(i, j)] = jac[(i, j)];
        }
        a[(i, n)] = -1.0;
        rhs[i] = -c[i];
    }
    for j in 0..n {
        a[(m + j, j)] = 1.0;
        rhs[m + j] = hi[j] - v[j];
        a[(m + n + j, j)] = -1.0;
        rhs[m + n + j] = v[j] - lo[j];
    }
    a[(rows - 1, n)] = -1.0;
    // Complementarity must be resolved well below the gradient scale, or
    // spurious bound multipliers bend the step; loosen only on breakdown.
    let sol = [1e-14, 1e-12, 1e-10]
        .iter()
        .map(|&tolerance| {
            let opts = QpOptions {
                tolerance,
                max_iterations: 200,
            };
            solve_qp(&q, &lin, &a, &rhs, &opts)
        })
        .find(|s| s.status != QpStatus::NumericalFailure)
        .ok_or_else(|| Error::Optimization("QP subproblem failed".into()))?;
    // A bound whose multiplier exceeds its slack is taken as active; the
    // interior point stops with such bounds only approximately attained.
    let d: Vec<f64> = (0..n)
        .map(|j| {
            let (dl, du) = (lo[j] - v[j], hi[j] - v[j]);
            let x = sol.x[j].clamp(dl, du);
            if sol.lambda[m + n + j] > x - dl {
                dl
            } else if sol.lambda[m + j] > du - x {
                du
            } else {
                x
            }
        })
        .collect();
    Ok(Subproblem {
        d,
        tau: sol.x[n].max(0.0),
        lambda_c: (0..m).map(|i| sol.lambda[i]).collect(),
        lambda_ub: (0..n).map(|j| sol.lambda[m + j]).collect(),
        lambda_lb: (0..n).map(|j| sol.lambda[m + n + j]).collect(),
    })
}

fn lagrangian_gradient(der: &ShootDerivatives, lambda_c: &[f64]) -> Vec<f64> {
    let lam = DVector::from_column_slice(lambda_c);
    let jt = der.jacobian.transpose() * lam;
    der.gradient.iter().zip(jt.iter()).map(|(g, j)| g + j).collect()
}

/// Stationarity and complementarity residual of the KKT system at `v`.
fn kkt_residual(it: &Iterate, sub: &Subproblem, lo: &[f64], hi: &[f64]) -> f64 {
    let lg = lagrangian_gradient(&it.der, &sub.lambda_c);
    let mut r: f64 = 0.0;
    for j in 0..it.v.len() {
        r = r.max((lg[j] + sub.lambda_ub[j] - sub.lambda_lb[j]).abs());
        r = r.max((sub.lambda_ub[j] * (hi[j] - it.v[j])).abs());
        r = r.max((sub.lambda_lb[j] * (it.v[j] - lo[j])).abs());
    }
    for (l, c) in sub.lambda_c.iter().zip(&it.der.shot.constraints) {
        r = r.max((l * c).abs());
    }
    r
}

pub fn solve_ocp(spec: &OcpSpec, opts: &OcpOptions) -> Result<OcpSolution> {
    spec.validate()?;
    let guess = initial_guess(spec, opts.feasibility_tolerance)?;
    solve_ocp_from(spec, &guess, opts)
}

pub fn solve_ocp_from(spec: &OcpSpec, guess: &[f64], opts: &OcpOptions) -> Result<OcpSolution> {
    spec.validate()?;
    let (v0, _) = clamp_controls(spec, guess)?;
    let (lo, hi) = (spec.lower(), spec.upper());
    let n = v0.len();
    let mut shots = 1;
    let der0 = shoot_with_derivatives(spec, &v0)?;
    if let Some(f) = &der0.shot.failure {
        return Err(Error::Optimization(format!("initial guess cannot be simulated: {f}")));
    }
    let initial_cost = der0.shot.cost;
    let mut it = Iterate { v: v0.clone(), der: der0 };
    let mut b = DMatrix::identity(n, n);
    let mut rho: f64 = 1.0;
    let mut status = OcpStatus::MaxIterations;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        let c = it.der.shot.constraints.clone();
        let mut sub = elastic_qp(&b, &it.der.gradient, &c, &it.der.jacobian, &it.v, &lo, &hi, rho)?;
        // A linearization that can only be met with slack calls for a larger penalty.
        while sub.tau > 1e-9 && rho < 1e8 {
            rho *= 10.0;
            sub = elastic_qp(&b, &it.der.gradient, &c, &it.der.jacobian, &it.v, &lo, &hi, rho)?;
        }
        let lam_sum: f64 = sub.lambda_c.iter().sum();
        rho = rho.max(1.1 * lam_sum + 1e-6);

        kkt = kkt_residual(&it, &sub, &lo, &hi);
        let viol = it.violation();
        let d_norm = sub.d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if viol <= opts.feasibility_tolerance
            && kkt <= opts.kkt_tolerance
            && d_norm <= opts.control_tolerance
        {
            status = OcpStatus::Optimal;
            break;
        }
        if d_norm <= opts.step_tolerance {
            status = if viol <= opts.feasibility_tolerance {
                OcpStatus::Optimal
            } else {
                worst_constraint(spec, &it.der.shot)
            };
            break;
        }
        iterations += 1;

        let g_d: f64 = it.der.gradient.iter().zip(&sub.d).map(|(g, d)| g * d).sum();
        let slope = g_d + rho * (sub.tau - viol);
        let phi0 = merit(&it.der.shot, rho);
        // Merit changes below this are integration noise.
        let noise = 1e-12 * (1.0 + phi0.abs());
        let trial = |v: &[f64]| shoot(spec, v);
        let step = |alpha: f64, extra: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|j| (it.v[j] + alpha * sub.d[j] + extra[j]).clamp(lo[j], hi[j]))
                .collect()
        };
        let zero = vec![0.0; n];
        let mut accepted: Option<Vec<f64>> = None;

        let full = step(1.0, &zero);
        let shot_full = trial(&full)?;
        shots += 1;
        if merit(&shot_full, rho) <= phi0 + 1e-4 * slope.min(0.0) + noise {
            accepted = Some(full);
        } else if shot_full.failure.is_none() {
            // Second-order correction against the curvature of the constraints.
            let c_soc: Vec<f64> = {
                let jd = &it.der.jacobian * DVector::from_column_slice(&sub.d);
                shot_full
                    .constraints
                    .iter()
                    .zip(jd.iter())
                    .map(|(cf, j)| cf - j)
                    .collect()
            };
            let soc = elastic_qp(&b, &it.der.gradient, &c_soc, &it.der.jacobian, &it.v, &lo, &hi, rho)?;
            let corr: Vec<f64> = (0..n).map(|j| soc.d[j] - sub.d[j]).collect();
            let cand = step(1.0, &corr);
            let shot_soc = trial(&cand)?;
            shots += 1;
            if merit(&shot_soc, rho) <= phi0 + 1e-4 * slope.min(0.0) + noise {
                accepted = Some(cand);
            }
        }
        if accepted.is_none() {
            let mut alpha = 0.5;
            while alpha > 1e-10 {
                let cand = step(alpha, &zero);
                let s = trial(&cand)?;
                shots += 1;
                if merit(&s, rho) <= phi0 + 1e-4 * alpha * slope.min(0.0) + noise {
                    accepted = Some(cand);
                    break;
                }
                alpha *= 0.5;
            }
        }
        let v_new = match accepted {
            Some(v) => v,
            None => {
                status = if viol <= opts.feasibility_tolerance && kkt <= opts.kkt_tolerance {
                    OcpStatus::Optimal
                } else {
                    OcpStatus::LineSearchFailure
                };
                break;
            }
        };
        let der_new = shoot_with_derivatives(spec, &v_new)?;
        shots += 1;

        // Damped BFGS update of the Lagrangian Hessian.
        let s_vec = DVector::from_iterator(n, (0..n).map(|j| v_new[j] - it.v[j]));
        let g_old = lagrangian_gradient(&it.der, &sub.lambda_c);
        let g_new = lagrangian_gradient(&der_new, &sub.lambda_c);
        let mut y = DVector::from_iterator(n, (0..n).map(|j| g_new[j] - g_old[j]));
        let bs = &b * &s_vec;
        let sbs = s_vec.dot(&bs);
        if sbs > 1e-300 {
            let sy = s_vec.dot(&y);
            if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                y = &y * theta + &bs * (1.0 - theta);
            }
            let sy = s_vec.dot(&y);
            if sy > 1e-300 {
                b += &y * y.transpose() / sy - &bs * bs.transpose() / sbs;
            }
        }
        it = Iterate { v: v_new, der: der_new };
    }

    let shot = shoot(spec, &it.v)?;
    let predicted = shot
        .trajectory
        .clone()
        .ok_or_else(|| Error::Optimization("final policy cannot be simulated".into()))?;
    let constraint_report = check_constraints(&predicted, &spec.path_limits, opts.feasibility_tolerance);
    Ok(OcpSolution {
        policy: spec.policy(&it.v),
        cost: shot.cost,
        constraint_report,
        solver: SolverInfo {
            status,
            iterations,
            kkt_residual: kkt,
            max_violation: shot.max_violation(),
            shots,
            penalty: rho,
        },
        predicted,
        initial_guess: spec.policy(&v0),
        initial_cost,
    })
}

fn worst_constraint(spec: &OcpSpec, shot: &ShootResult) -> OcpStatus {
    let n_l = spec.path_limits.len().max(1);
    let (idx, violation) = shot
        .constraints
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, c)| if *c > a.1 { (i, *c) } else { a });
    OcpStatus::Infeasible {
        constraint: spec
            .path_limits
            .get(idx % n_l)
            .map_or(String::new(), |l| l.name.clone()),
        violation,
    }
}

#[cfg(test)]
mod tests;
