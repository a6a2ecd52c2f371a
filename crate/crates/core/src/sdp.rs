//! Small dense semidefinite programs in linear-matrix-inequality form:
//!
//! ```text
//! minimize cᵀx  subject to  F_b(x) = F_b0 + Σ_j x_j F_bj ≽ 0,  b = 1..B
//! ```
//!
//! Solved by a primal log-barrier path-following method. Phase I finds a
//! strictly feasible point (or certifies infeasibility) by minimizing a common
//! shift `s` with `F_b(x) + s·I ≽ 0`; phase II follows the central path until
//! the barrier duality-gap bound `Σ n_b / t` falls below the tolerance.
//! The feasible set must be bounded.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// One LMI block with dense symmetric coefficients; only variables that
/// actually enter the block are listed.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub name: String,
    pub f0: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn new(name: &str, dim: usize) -> Self {
        LmiBlock {
            name: name.to_string(),
            f0: DMatrix::zeros(dim, dim),
            terms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.f0.nrows()
    }

    /// Adds `coeff` to the coefficient matrix of `var` at `(i, j)` and `(j, i)`.
    pub fn add_sym(&mut self, var: usize, i: usize, j: usize, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        let n = self.dim();
        let pos = match self.terms.iter().position(|(v, _)| *v == var) {
            Some(p) => p,
            None => {
                self.terms.push((var, DMatrix::zeros(n, n)));
                self.terms.len() - 1
            }
        };
        let m = &mut self.terms[pos].1;
        m[(i, j)] += coeff;
        if i != j {
            m[(j, i)] += coeff;
        }
    }

    /// Adds `value` to the constant term at `(i, j)` and `(j, i)`.
    pub fn add_const(&mut self, i: usize, j: usize, value: f64) {
        self.f0[(i, j)] += value;
        if i != j {
            self.f0[(j, i)] += value;
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (v, m) in &self.terms {
            if x[*v] != 0.0 {
                f += m * x[*v];
            }
        }
        f
    }
}

#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub n_vars: usize,
    pub c: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpOptions {
    /// Target bound on `cᵀx − p*`.
    pub gap_tolerance: f64,
    /// Central-path parameter growth per outer iteration.
    pub t_factor: f64,
    pub max_newton_per_centering: usize,
    pub max_outer: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            gap_tolerance: 1e-7,
            t_factor: 10.0,
            max_newton_per_centering: 200,
            max_outer: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    /// Phase I proved `min_x max_b λ_max(−F_b(x)) ≥ lower_bound > 0`.
    Infeasible { lower_bound: f64 },
    NumericalFailure { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// `Σ n_b / t` at termination: an upper bound on `cᵀx − p*`.
    pub gap_bound: f64,
    pub newton_steps: usize,
    /// Smallest eigenvalue of every block at `x`, in block order.
    pub block_min_eigenvalues: Vec<f64>,
}

/// Barrier state for one block: Cholesky factor and whitened coefficients.
fn block_derivatives(
    block: &LmiBlock,
    x: &[f64],
    shift: Option<(usize, f64)>,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) -> Option<f64> {
    let n = block.dim();
    let mut f = block.eval(x);
    if let Some((_, s)) = shift {
        for i in 0..n {
            f[(i, i)] += s;
        }
    }
    let chol = Cholesky::new(f)?;
    let l = chol.l();
    let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut vars: Vec<usize> = block.terms.iter().map(|(v, _)| *v).collect();
    let mut zs: Vec<DMatrix<f64>> = block
        .terms
        .iter()
        .map(|(_, m)| whiten(&l, m))
        .collect();
    if let Some((sv, _)) = shift {
        vars.push(sv);
        zs.push(whiten(&l, &DMatrix::identity(n, n)));
    }
    for (a, &va) in vars.iter().enumerate() {
        grad[va] -= zs[a].trace();
        for (b, &vb) in vars.iter().enumerate().skip(a) {
            let v = zs[a].dot(&zs[b]);
            hess[(va, vb)] += v;
            if a != b {
                hess[(vb, va)] += v;
            }
        }
    }
    Some(logdet)
}

/// `L⁻¹ M L⁻ᵀ` for the lower Cholesky factor `L`.
fn whiten(l: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l.solve_lower_triangular(m).expect("nonsingular factor");
    let yt = y.transpose();
    l.solve_lower_triangular(&yt).expect("nonsingular factor")
}

fn barrier_value(blocks: &[LmiBlock], x: &[f64], shift: Option<f64>) -> Option<f64> {
    let mut total = 0.0;
    for b in blocks {
        let mut f = b.eval(x);
        if let Some(s) = shift {
            for i in 0..f.nrows() {
                f[(i, i)] += s;
            }
        }
        let chol = Cholesky::<f64, Dyn>::new(f)?;
        total -= 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Some(total)
}

/// Jacobi-scaled Newton solve `H Δ = −g`.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
    let n = grad.len();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let h = hess[(i, i)];
            if h > 0.0 {
                1.0 / h.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| d[i] * hess[(i, j)] * d[j]);
    let rhs = DVector::from_fn(n, |i, _| -d[i] * grad[i]);
    let y = crate::linalg::spd_solve(&scaled, &rhs)?;
    Some(DVector::from_fn(n, |i, _| d[i] * y[i]))
}

struct Path<'a> {
    blocks: &'a [LmiBlock],
    /// Objective over the working variables.
    c: Vec<f64>,
    n: usize,
    /// Index of the phase-I shift variable, if any.
    shift_var: Option<usize>,
    newton_steps: usize,
}

impl Path<'_> {
    fn shift(&self, x: &[f64]) -> Option<f64> {
        self.shift_var.map(|i| x[i])
    }

    fn value(&self, x: &[f64], t: f64) -> Option<f64> {
        let lin: f64 = self.c.iter().zip(x).map(|(c, x)| c * x).sum();
        Some(t * lin + barrier_value(self.blocks, x, self.shift(x))?)
    }

    /// Newton centering at parameter `t`. `stop` is checked after every step.
    fn center(
        &mut self,
        x: &mut Vec<f64>,
        t: f64,
        max_steps: usize,
        stop: &dyn Fn(&[f64]) -> bool,
    ) -> Result<(), String> {
        for _ in 0..max_steps {
            let mut grad = DVector::from_fn(self.n, |i, _| t * self.c[i]);
            let mut hess = DMatrix::zeros(self.n, self.n);
            let shift = self.shift_var.map(|i| (i, x[i]));
            for b in self.blocks {
                block_derivatives(b, x, shift, &mut grad, &mut hess)
                    .ok_or_else(|| format!("iterate left the cone in block `{}`", b.name))?;
            }
            let dir = newton_direction(&hess, &grad).ok_or("singular Newton system")?;
            let decrement = -grad.dot(&dir);
            if !(decrement >= 0.0) {
                return Err("Newton direction is not a descent direction".into());
            }
            if decrement * 0.5 <= 1e-10 {
                return Ok(());
            }
            let f0 = self.value(x, t).ok_or("iterate left the cone")?;
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
                if let Some(f1) = self.value(&trial, t) {
                    if f1 <= f0 - 0.25 * alpha * decrement {
                        *x = trial;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            self.newton_steps += 1;
            if !moved {
                // Converged to numerical precision along this direction.
                return Ok(());
            }
            if stop(x) {
                return Ok(());
            }
        }
        Ok(())
    }
}

fn min_eigenvalues(blocks: &[LmiBlock], x: &[f64]) -> Vec<f64> {
    blocks
        .iter()
        .map(|b| crate::linalg::min_eigenvalue(&b.eval(x)))
        .collect()
}

/// Solves the LMI problem starting from `x0` (need not be feasible).
pub fn solve_lmi(problem: &LmiProblem, x0: &[f64], opts: &SdpOptions) -> SdpSolution {
    let n = problem.n_vars;
    let dims: f64 = problem.blocks.iter().map(|b| b.dim() as f64).sum();
    let mut x = x0.to_vec();
    let mut newton_steps = 0;
    let fail = |reason: String, x: Vec<f64>, steps: usize| SdpSolution {
        status: SdpStatus::NumericalFailure { reason },
        objective: problem.c.iter().zip(&x).map(|(c, x)| c * x).sum(),
        block_min_eigenvalues: min_eigenvalues(&problem.blocks, &x),
        x,
        gap_bound: f64::INFINITY,
        newton_steps: steps,
    };

    // Phase I: minimize s subject to F_b(x) + s·I ≽ 0 and s ≥ −1.
    let worst = min_eigenvalues(&problem.blocks, &x)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(worst > 0.0) {
        let mut blocks = problem.blocks.clone();
        // Shifted like every other block, this encodes 1 + s ≥ 0.
        let mut floor = LmiBlock::new("phase-I floor", 1);
        floor.add_const(0, 0, 1.0);
        blocks.push(floor);
        let dims1 = dims + 1.0;
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        let mut path = Path {
            blocks: &blocks,
            c,
            n: n + 1,
            shift_var: Some(n),
            newton_steps: 0,
        };
        let mut xs = x.clone();
        xs.push(1.0 - worst.min(0.0));
        let mut t = 1.0;
        let feasible = |v: &[f64]| v[n] < 0.0;
        let mut found = false;
        for _ in 0..opts.max_outer {
            if let Err(e) = path.center(&mut xs, t, opts.max_newton_per_centering, &feasible) {
                return fail(format!("phase I: {e}"), xs[..n].to_vec(), path.newton_steps);
            }
            if feasible(&xs) {
                found = true;
                break;
            }
            let lower = xs[n] - dims1 / t;
            if lower > 0.0 {
                return SdpSolution {
                    status: SdpStatus::Infeasible { lower_bound: lower },
                    objective: f64::NAN,
                    block_min_eigenvalues: min_eigenvalues(&problem.blocks, &xs[..n]),
                    x: xs[..n].to_vec(),
                    gap_bound: dims1 / t,
                    newton_steps: path.newton_steps,
                };
            }
            if dims1 / t < 1e-13 {
                break;
            }
            t *= opts.t_factor;
        }
        newton_steps += path.newton_steps;
        if !found {
            let s = xs[n];
            if s >= 0.0 {
                return SdpSolution {
                    status: SdpStatus::Infeasible { lower_bound: s - dims1 / t },
                    objective: f64::NAN,
                    block_min_eigenvalues: min_eigenvalues(&problem.blocks, &xs[..n]),
                    x: xs[..n].to_vec(),
                    gap_bound: dims1 / t,
                    newton_steps,
                };
            }
        }
        xs.truncate(n);
        x = xs;
    }

    // Phase II.
    let mut path = Path {
        blocks: &problem.blocks,
        c: problem.c.clone(),
        n,
        shift_var: None,
        newton_steps: 0,
    };
    let c_norm = problem.c.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let mut t = 1.0 / c_norm;
    let never = |_: &[f64]| false;
    for _ in 0..opts.max_outer {
        if let Err(e) = path.center(&mut x, t, opts.max_newton_per_centering, &never) {
            return fail(format!("phase II: {e}"), x, newton_steps + path.newton_steps);
        }
        if dims / t <= opts.gap_tolerance {
            break;
        }
        t *= opts.t_factor;
    }
    let gap_bound = dims / t;
    let status = if gap_bound <= opts.gap_tolerance {
        SdpStatus::Optimal
    } else {
        SdpStatus::NumericalFailure {
            reason: format!("gap bound {gap_bound:e} above tolerance after the outer-iteration limit"),
        }
    };
    SdpSolution {
        status,
        objective: problem.c.iter().zip(&x).map(|(c, x)| c * x).sum(),
        block_min_eigenvalues: min_eigenvalues(&problem.blocks, &x),
        x,
        gap_bound,
        newton_steps: newton_steps + path.newton_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min x subject to x ≥ 1 and x ≤ 3 as 1×1 blocks.
    #[test]
    fn scalar_linear_program() {
        let mut lo = LmiBlock::new("lo", 1);
        lo.add_const(0, 0, -1.0);
        lo.add_sym(0, 0, 0, 1.0);
        let mut hi = LmiBlock::new("hi", 1);
        hi.add_const(0, 0, 3.0);
        hi.add_sym(0, 0, 0, -1.0);
        let p = LmiProblem {
            n_vars: 1,
            c: vec![1.0],
            blocks: vec![lo, hi],
        };
        let s = solve_lmi(&p, &[0.0], &SdpOptions::default());
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-6, "{s:?}");
    }

    /// max eigenvalue of a fixed symmetric matrix A as min t s.t. tI − A ≽ 0.
    #[test]
    fn max_eigenvalue_as_sdp() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let mut b = LmiBlock::new("tI - A", 3);
        for i in 0..3 {
            for j in i..3 {
                b.add_const(i, j, -a[(i, j)]);
            }
            b.add_sym(0, i, i, 1.0);
        }
        let mut cap = LmiBlock::new("t <= 100", 1);
        cap.add_const(0, 0, 100.0);
        cap.add_sym(0, 0, 0, -1.0);
        let p = LmiProblem {
            n_vars: 1,
            c: vec![1.0],
            blocks: vec![b, cap],
        };
        let s = solve_lmi(&p, &[0.0], &SdpOptions::default());
        assert_eq!(s.status, SdpStatus::Optimal);
        let expected = crate::linalg::max_eigenvalue(&a);
        assert!((s.x[0] - expected).abs() < 1e-6, "{} vs {expected}", s.x[0]);
    }

    #[test]
    fn detects_infeasibility() {
        // x ≥ 2 and x ≤ 1.
        let mut lo = LmiBlock::new("lo", 1);
        lo.add_const(0, 0, -2.0);
        lo.add_sym(0, 0, 0, 1.0);
        let mut hi = LmiBlock::new("hi", 1);
        hi.add_const(0, 0, 1.0);
        hi.add_sym(0, 0, 0, -1.0);
        let p = LmiProblem {
            n_vars: 1,
            c: vec![0.0],
            blocks: vec![lo, hi],
        };
        let s = solve_lmi(&p, &[0.0], &SdpOptions::default());
        match s.status {
            SdpStatus::Infeasible { lower_bound } => assert!(lower_bound > 0.0),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn matrix_variable_lyapunov() {
        // Find P = [p0 p1; p1 p2] with P ≽ I and AᵀP + PA ≼ −I, minimizing tr P.
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let basis = |k: usize| -> DMatrix<f64> {
            match k {
                0 => DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
                1 => DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
                _ => DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            }
        };
        let mut pos = LmiBlock::new("P - I", 2);
        let mut lyap = LmiBlock::new("-(A'P + PA) - I", 2);
        let mut cap = LmiBlock::new("100 - tr P", 1);
        cap.add_const(0, 0, 100.0);
        for k in 0..3 {
            let e = basis(k);
            let l = -(a.transpose() * &e + &e * &a);
            for i in 0..2 {
                for j in i..2 {
                    pos.add_sym(k, i, j, e[(i, j)]);
                    lyap.add_sym(k, i, j, l[(i, j)]);
                }
            }
            if k != 1 {
                cap.add_sym(k, 0, 0, -1.0);
            }
        }
        for i in 0..2 {
            pos.add_const(i, i, -1.0);
            lyap.add_const(i, i, -1.0);
        }
        let p = LmiProblem {
            n_vars: 3,
            c: vec![1.0, 0.0, 1.0],
            blocks: vec![pos, lyap, cap],
        };
        let s = solve_lmi(&p, &[0.0; 3], &SdpOptions::default());
        assert_eq!(s.status, SdpStatus::Optimal, "{s:?}");
        let pm = DMatrix::from_row_slice(2, 2, &[s.x[0], s.x[1], s.x[1], s.x[2]]);
        let lyap_val = a.transpose() * &pm + &pm * &a;
        assert!(crate::linalg::max_eigenvalue(&lyap_val) <= -1.0 + 1e-6);
        assert!(crate::linalg::min_eigenvalue(&pm) >= 1.0 - 1e-6);
        assert!(s.block_min_eigenvalues.iter().all(|v| *v > 0.0));
    }
}
