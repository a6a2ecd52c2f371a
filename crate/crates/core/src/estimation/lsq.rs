//! Bound-constrained nonlinear least squares, `min ½‖r(x)‖²` s.t. `l ≤ x ≤ u`.
//!
//! Levenberg–Marquardt with Marquardt scaling, restricted at every iteration
//! to the variables that are not held at a bound by the gradient, and with
//! trial points projected onto the box. The Jacobian is formed by central
//! differences (one-sided next to a bound).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_solve;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Stop when the infinity norm of the projected gradient falls below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step reduces the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    /// Relative finite-difference step; the absolute step is
    /// `fd_step · max(|x_j|, fd_scale_floor)`.
    pub fd_step: f64,
    pub fd_scale_floor: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        LsqOptions {
            max_iterations: 200,
            gradient_tolerance: 1e-12,
            cost_tolerance: 1e-14,
            step_tolerance: 1e-12,
            fd_step: 1e-6,
            fd_scale_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    CostTolerance,
    StepTolerance,
    MaxIterations,
    /// No trial step reduced the cost even with heavy damping.
    NoProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsqOutcome {
    pub x: Vec<f64>,
    /// `½‖r(x)‖²`.
    pub cost: f64,
    pub projected_gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Variables resting on a bound at termination.
    pub at_bound: Vec<bool>,
}

struct Counter<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> Result<Vec<f64>>> Counter<F> {
    fn eval(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.evaluations += 1;
        let r = (self.f)(x)?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimization("non-finite residual".into()));
        }
        Ok(r)
    }
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| (x[i] - (x[i] - g[i]).clamp(lower[i], upper[i])).abs())
        .fold(0.0, f64::max)
}

pub fn bounded_least_squares<F>(
    f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LsqOptions,
) -> Result<LsqOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(Error::dims("bounds", n, lower.len().min(upper.len())));
    }
    if (0..n).any(|i| !(lower[i] <= upper[i])) {
        return Err(Error::InvalidInput("lower bound exceeds upper bound".into()));
    }
    let mut fun = Counter { f, evaluations: 0 };
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut r = fun.eval(&x)?;
    let m = r.len();
    let mut cost = half_sq(&r);
    let mut mu = -1.0;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut pg_norm = f64::INFINITY;

    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = fd_jacobian(&mut fun, &x, &r, lower, upper, opts)?;
        let rv = DVector::from_column_slice(&r);
        let g: Vec<f64> = (jac.transpose() * &rv).iter().cloned().collect();
        pg_norm = projected_gradient_norm(&x, &g, lower, upper);
        if pg_norm <= opts.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let held_low = x[i] <= lower[i] && g[i] > 0.0;
                let held_high = x[i] >= upper[i] && g[i] < 0.0;
                !(held_low || held_high)
            })
            .collect();
        if free.is_empty() {
            termination = Termination::GradientTolerance;
            break;
        }
        let jf = DMatrix::from_fn(m, free.len(), |i, k| jac[(i, free[k])]);
        let jtj = jf.transpose() * &jf;
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let dmax = jtj.diagonal().iter().cloned().fold(0.0, f64::max);
        let scale: Vec<f64> = jtj
            .diagonal()
            .iter()
            .map(|d| d.max(1e-12 * dmax).max(f64::MIN_POSITIVE))
            .collect();
        if mu < 0.0 {
            mu = 1e-3;
        }

        let mut accepted = false;
        let mut small_step = false;
        let mut small_decrease = false;
        for _ in 0..40 {
            let mut lhs = jtj.clone();
            for k in 0..free.len() {
                lhs[(k, k)] += mu * scale[k];
            }
            let delta = match spd_solve(&lhs, &(-&gf)) {
                Some(d) => d,
                None => {
                    mu *= nu;
                    nu *= 2.0;
                    continue;
                }
            };
            let mut x_new = x.clone();
            for (k, &i) in free.iter().enumerate() {
                x_new[i] += delta[k];
            }
            project(&mut x_new, lower, upper);
            let step: Vec<f64> = free.iter().map(|&i| x_new[i] - x[i]).collect();
            let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm <= opts.step_tolerance * (x_norm + opts.step_tolerance) {
                small_step = true;
                break;
            }
            // Predicted decrease of the linear model along the projected step.
            let sv = DVector::from_column_slice(&step);
            let lin = &rv + &jf * &sv;
            let predicted = cost - 0.5 * lin.norm_squared();
            let (r_new, cost_new) = match fun.eval(&x_new) {
                Ok(rn) => {
                    let c = half_sq(&rn);
                    (rn, c)
                }
                Err(_) => (Vec::new(), f64::INFINITY),
            };
            let actual = cost - cost_new;
            let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };
            if cost_new.is_finite() && actual > 0.0 && ratio > 1e-4 {
                small_decrease = actual <= opts.cost_tolerance * cost;
                x = x_new;
                r = r_new;
                cost = cost_new;
                mu *= (1.0 / 3.0f64).max(1.0 - (2.0 * ratio - 1.0).powi(3));
                mu = mu.max(1e-15);
                nu = 2.0;
                accepted = true;
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if small_step {
            termination = Termination::StepTolerance;
            break;
        }
        if !accepted {
            termination = Termination::NoProgress;
            break;
        }
        if small_decrease {
            termination = Termination::CostTolerance;
            break;
        }
    }
    let at_bound = (0..n).map(|i| x[i] <= lower[i] || x[i] >= upper[i]).collect();
    Ok(LsqOutcome {
        x,
        cost,
        projected_gradient_norm: pg_norm,
        iterations,
        evaluations: fun.evaluations,
        termination,
        at_bound,
    })
}

fn fd_jacobian<F: FnMut(&[f64]) -> Result<Vec<f64>>>(
    fun: &mut Counter<F>,
    x: &[f64],
    r: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LsqOptions,
) -> Result<DMatrix<f64>> {
    let (m, n) = (r.len(), x.len());
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = opts.fd_step * x[j].abs().max(opts.fd_scale_floor);
        let up = x[j] + h <= upper[j];
        let down = x[j] - h >= lower[j];
        let col: Vec<f64> = if up && down {
            xp[j] = x[j] + h;
            let rp = fun.eval(&xp)?;
            xp[j] = x[j] - h;
            let rm = fun.eval(&xp)?;
            rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        } else if up {
            xp[j] = x[j] + h;
            let rp = fun.eval(&xp)?;
            rp.iter().zip(r).map(|(a, b)| (a - b) / h).collect()
        } else if down {
            xp[j] = x[j] - h;
            let rm = fun.eval(&xp)?;
            r.iter().zip(&rm).map(|(a, b)| (a - b) / h).collect()
        } else {
            vec![0.0; m]
        };
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = col[i];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
    }

    #[test]
    fn solves_rosenbrock() {
        let out = bounded_least_squares(
            rosenbrock,
            &[-1.2, 1.0],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &LsqOptions::default(),
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-7, "{out:?}");
        assert!((out.x[1] - 1.0).abs() < 1e-7);
        assert!(out.cost < 1e-14);
    }

    #[test]
    fn active_bound_is_reported() {
        // Unconstrained minimum at (3, -2).
        let f = |x: &[f64]| Ok(vec![x[0] - 3.0, x[1] + 2.0]);
        let out =
            bounded_least_squares(f, &[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0], &LsqOptions::default())
                .unwrap();
        assert_eq!(out.x, vec![1.0, 0.0]);
        assert_eq!(out.at_bound, vec![true, true]);
        assert_eq!(out.termination, Termination::GradientTolerance);
    }

    #[test]
    fn linear_problem_exact() {
        // r = A x - b with a tall A.
        let f = |x: &[f64]| {
            Ok(vec![
                x[0] + 2.0 * x[1] - 5.0,
                3.0 * x[0] - x[1] - 1.0,
                x[0] + x[1] - 3.0,
            ])
        };
        let out = bounded_least_squares(
            f,
            &[0.0, 0.0],
            &[-10.0, -10.0],
            &[10.0, 10.0],
            &LsqOptions::default(),
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 2.0).abs() < 1e-8, "{out:?}");
    }

    #[test]
    fn rejects_inverted_bounds() {
        let f = |x: &[f64]| Ok(vec![x[0]]);
        assert!(bounded_least_squares(f, &[0.0], &[1.0], &[0.0], &LsqOptions::default()).is_err());
    }
}
