//! Local identifiability and observability by a sensitivity-rank test.
//!
//! The sampled output map `(x₀, θ) ↦ [y(t₁); …; y(t_K)]` is differentiated by
//! central finite differences; full column rank of its Jacobian certifies that
//! both the initial state and the parameters are locally recoverable.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelFamily;
use crate::sim::{integrate, state_names, InputSignal, StepControl};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTestOptions {
    /// Relative finite-difference step (absolute floor `fd_floor`).
    pub fd_step: f64,
    pub fd_floor: f64,
    /// Singular values below `tol · σ_max` count as zero.
    pub tol: f64,
    pub control: StepControl,
}

impl Default for RankTestOptions {
    fn default() -> Self {
        RankTestOptions {
            fd_step: 1e-5,
            fd_floor: 1e-8,
            tol: 1e-8,
            // Fixed steps keep the sampled map smooth in (x₀, θ).
            control: StepControl::fixed(0.01),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    IdentifiableObservable,
    Deficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub jacobian_rows: usize,
    pub jacobian_cols: usize,
    pub column_names: Vec<String>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub tolerance: f64,
    pub verdict: Verdict,
    /// Right singular vectors spanning the numerical null space.
    pub null_space: Vec<Vec<f64>>,
    /// `|J_ij| > 1e-12`, row-major `jacobian_rows × jacobian_cols`.
    #[serde(skip)]
    pub zero_pattern: Vec<Vec<bool>>,
}

impl RankReport {
    /// Tableau analogue: one 0/1 row per stacked output sample.
    pub fn zero_pattern_csv(&self) -> String {
        let mut out = self.column_names.join(",");
        out.push('\n');
        for row in &self.zero_pattern {
            let cells: Vec<&str> = row.iter().map(|b| if *b { "1" } else { "0" }).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Number of nonzero Jacobian entries in the named column.
    pub fn column_support(&self, name: &str) -> Option<usize> {
        let j = self.column_names.iter().position(|c| c == name)?;
        Some(self.zero_pattern.iter().filter(|r| r[j]).count())
    }
}

fn sampled_outputs(
    family: &dyn ModelFamily,
    v: &[f64],
    n_x: usize,
    input: &dyn InputSignal,
    sample_times: &[f64],
    control: &StepControl,
) -> Result<Vec<f64>> {
    let model = family.build(&v[n_x..])?;
    if sample_times.len() == 1 {
        let mut y = vec![0.0; model.dims().n_y];
        model.output_into(&v[..n_x], &mut y);
        return Ok(y);
    }
    let traj = integrate(&model, &v[..n_x], input, sample_times, control)?;
    Ok(traj.outputs.into_iter().flatten().collect())
}

/// Rank of the sensitivity Jacobian of the sampled outputs w.r.t. `(x₀, θ)`.
/// `x0` is the state at `sample_times[0]`.
pub fn local_rank_test(
    family: &dyn ModelFamily,
    x0: &[f64],
    theta: &[f64],
    input: &dyn InputSignal,
    sample_times: &[f64],
    opts: &RankTestOptions,
) -> Result<RankReport> {
    if sample_times.is_empty() {
        return Err(Error::InvalidInput("sample_times must be nonempty".into()));
    }
    if !(opts.fd_step > 0.0) {
        return Err(Error::InvalidInput("fd_step must be positive".into()));
    }
    if theta.len() != family.n_params() {
        return Err(Error::dims("parameter vector", family.n_params(), theta.len()));
    }
    let n_x = x0.len();
    let mut v: Vec<f64> = x0.to_vec();
    v.extend_from_slice(theta);
    let base = sampled_outputs(family, &v, n_x, input, sample_times, &opts.control)?;
    let rows = base.len();
    let cols = v.len();

    let mut column_names = state_names(n_x)
        .into_iter()
        .map(|s| format!("{s}0"))
        .collect::<Vec<_>>();
    column_names.extend(family.param_names());

    let columns: Vec<Result<Vec<f64>>> = (0..cols)
        .into_par_iter()
        .map(|j| {
            let h = (opts.fd_step * v[j].abs()).max(opts.fd_floor);
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let fail = |e: Error| {
                Error::InvalidInput(format!(
                    "simulation failed while perturbing column `{}`: {e}",
                    column_names[j]
                ))
            };
            let yp = sampled_outputs(family, &vp, n_x, input, sample_times, &opts.control)
                .map_err(fail)?;
            let ym = sampled_outputs(family, &vm, n_x, input, sample_times, &opts.control)
                .map_err(fail)?;
            Ok(yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * h)).collect())
        })
        .collect();

    let mut jac = DMatrix::zeros(rows, cols);
    for (j, col) in columns.into_iter().enumerate() {
        let col = col?;
        for i in 0..rows {
            jac[(i, j)] = col[i];
        }
    }
    let zero_pattern = (0..rows)
        .map(|i| (0..cols).map(|j| jac[(i, j)].abs() > 1e-12).collect())
        .collect();

    let (singular_values, null_space) = if rows == 0 || cols == 0 {
        (Vec::new(), Vec::new())
    } else {
        // Zero rows pad a wide Jacobian so V spans the whole parameter space.
        let padded = if cols > rows {
            jac.clone().resize(cols, cols, 0.0)
        } else {
            jac.clone()
        };
        let svd = padded.svd(false, true);
        let v_t = svd.v_t.expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
        });
        let sv: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
        let smax = sv.first().cloned().unwrap_or(0.0);
        let mut null = Vec::new();
        for (pos, &k) in order.iter().enumerate() {
            if smax == 0.0 || sv[pos] < opts.tol * smax {
                null.push(v_t.row(k).iter().cloned().collect());
            }
        }
        (sv, null)
    };
    let smax = singular_values.first().cloned().unwrap_or(0.0);
    let numerical_rank = if smax == 0.0 {
        0
    } else {
        singular_values.iter().filter(|s| **s >= opts.tol * smax).count()
    };
    let verdict = if numerical_rank == cols {
        Verdict::IdentifiableObservable
    } else {
        Verdict::Deficient
    };
    Ok(RankReport {
        jacobian_rows: rows,
        jacobian_cols: cols,
        column_names,
        singular_values,
        numerical_rank,
        tolerance: opts.tol,
        verdict,
        null_space,
        zero_pattern,
    })
}
