//! Dense convex quadratic programs `min ½xᵀQx + cᵀx  s.t.  Ax ≤ b` by a
//! Mehrotra predictor–corrector interior-point method.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    /// The normal-equation matrix lost positive definiteness.
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the rows of `A`, nonnegative.
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

pub struct QpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }
}

/// Residual tolerance accepted when the interior point cannot progress further.
const RELAXED: f64 = 1e-8;

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a: f64 = 1.0;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            a = a.min(-v[i] / dv[i]);
        }
    }
    a
}

struct Newton<'a> {
    a: &'a DMatrix<f64>,
    /// Factor of the Jacobi-scaled normal matrix `S K S`.
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    scale: DVector<f64>,
}

impl Newton<'_> {
    /// Solves for `(dx, ds, dλ)` given `S dλ + Λ ds = w`.
    fn step(
        &self,
        r_d: &DVector<f64>,
        r_p: &DVector<f64>,
        s: &DVector<f64>,
        lam: &DVector<f64>,
        w: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let d = lam.component_div(s);
        let t = w.component_div(s) + d.component_mul(r_p);
        let rhs = -r_d - self.a.transpose() * &t;
        let dx = self.chol.solve(&rhs.component_mul(&self.scale)).component_mul(&self.scale);
        let adx = self.a * &dx;
        let ds = -r_p - &adx;
        let dl = t + d.component_mul(&adx);
        (dx, ds, dl)
    }
}

pub fn solve_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    opts: &QpOptions,
) -> QpSolution {
    let (m, n) = a.shape();
    let mut x = DVector::zeros(n);
    let mut s = DVector::from_element(m, 1.0);
    let mut lam = DVector::from_element(m, 1.0);
    let scale_d = 1.0 + c.amax();
    let scale_p = 1.0 + if m > 0 { b.amax() } else { 0.0 };

    let factor = |s: &DVector<f64>, lam: &DVector<f64>| {
        let d = lam.component_div(s);
        let mut k = q.clone();
        let mut ad = a.clone();
        for i in 0..m {
            ad.row_mut(i).scale_mut(d[i]);
        }
        k += a.transpose() * ad;
        let scale = k.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 });
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] *= scale[i] * scale[j];
            }
        }
        [1e-14, 1e-10, 1e-7].iter().find_map(|reg| {
            let mut kr = k.clone();
            for j in 0..n {
                kr[(j, j)] += reg;
            }
            kr.cholesky().map(|chol| Newton {
                a,
                chol,
                scale: scale.clone(),
            })
        })
    };

    // Starting point: one affine step from (0, 1, 1), then shifted into the interior.
    if m > 0 {
        if let Some(nt) = factor(&s, &lam) {
            let r_d = q * &x + c + a.transpose() * &lam;
            let r_p = a * &x + &s - b;
            let w = -s.component_mul(&lam);
            let (dx, ds, dl) = nt.step(&r_d, &r_p, &s, &lam, &w);
            x += dx;
            s = (s + ds).map(|v| v.abs().max(1.0));
            lam = (lam + dl).map(|v| v.abs().max(1.0));
        }
    }

    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let r_d = q * &x + c + a.transpose() * &lam;
        let r_p = a * &x + &s - b;
        let mu = if m > 0 { s.dot(&lam) / m as f64 } else { 0.0 };
        if r_d.amax() <= opts.tolerance * scale_d
            && (m == 0 || r_p.amax() <= opts.tolerance * scale_p)
            && mu <= opts.tolerance
        {
            status = QpStatus::Optimal;
            break;
        }
        // Once complementarity has collapsed, accept a slightly looser point
        // rather than fail on the ill-conditioned Newton system.
        let near = r_d.amax() <= RELAXED * scale_d && (m == 0 || r_p.amax() <= RELAXED * scale_p);
        if near && mu <= f64::MIN_POSITIVE.sqrt() {
            status = QpStatus::Optimal;
            break;
        }
        iterations += 1;
        let nt = match factor(&s, &lam) {
            Some(nt) => nt,
            None => {
                status = if near {
                    QpStatus::Optimal
                } else {
                    QpStatus::NumericalFailure
                };
                break;
            }
        };
        let w_aff = -s.component_mul(&lam);
        let (_, ds_a, dl_a) = nt.step(&r_d, &r_p, &s, &lam, &w_aff);
        let ap = max_step(&s, &ds_a);
        let ad = max_step(&lam, &dl_a);
        let mu_aff = if m > 0 {
            (&s + &ds_a * ap).dot(&(&lam + &dl_a * ad)) / m as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
        let w = &w_aff - ds_a.component_mul(&dl_a) + DVector::from_element(m, sigma * mu);
        let (dx, ds, dl) = nt.step(&r_d, &r_p, &s, &lam, &w);
        let eta = (1.0 - mu).clamp(0.9, 0.995);
        let ap = (eta * max_step(&s, &ds)).min(1.0);
        let ad = (eta * max_step(&lam, &dl)).min(1.0);
        x += dx * ap;
        s += ds * ap;
        lam += dl * ad;
    }
    QpSolution {
        x,
        lambda: lam,
        status,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_constrained_quadratic() {
        // min ½‖x − (2, −3)‖² on [−1, 1]².
        let q = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![-2.0, 3.0]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_element(4, 1.0);
        let sol = solve_qp(&q, &c, &a, &b, &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-8 && (sol.x[1] + 1.0).abs() < 1e-8, "{}", sol.x);
        // Active-row multipliers equal the pull of the objective.
        assert!((sol.lambda[0] - 1.0).abs() < 1e-6 && (sol.lambda[3] - 2.0).abs() < 1e-6);
        assert!(sol.lambda[1].abs() < 1e-6 && sol.lambda[2].abs() < 1e-6);
    }

    #[test]
    fn linear_program_with_zero_hessian() {
        // max x + y s.t. x + 2y ≤ 4, 3x + y ≤ 6, x, y ≥ 0  → (1.6, 1.2).
        let q = DMatrix::zeros(2, 2);
        let c = DVector::from_vec(vec![-1.0, -1.0]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![4.0, 6.0, 0.0, 0.0]);
        let sol = solve_qp(&q, &c, &a, &b, &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.6).abs() < 1e-7 && (sol.x[1] - 1.2).abs() < 1e-7, "{}", sol.x);
    }

    #[test]
    fn unconstrained() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let c = DVector::from_vec(vec![1.0, -1.0]);
        let sol = solve_qp(&q, &c, &DMatrix::zeros(0, 2), &DVector::zeros(0), &QpOptions::default());
        assert_eq!(sol.status, QpStatus::Optimal);
        let r = &q * &sol.x + &c;
        assert!(r.amax() < 1e-9);
    }
}
