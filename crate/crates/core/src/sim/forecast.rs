//! Least-squares polynomial extrapolation of a sampled series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial in the normalized variable `s = (t - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub center: f64,
    pub scale: f64,
    /// Coefficients of `s⁰, s¹, …`.
    pub coeffs: Vec<f64>,
}

impl PolyFit {
    pub fn fit(series: &[(f64, f64)], degree: usize) -> Result<PolyFit> {
        let n = series.len();
        if n < degree + 1 {
            return Err(Error::InvalidInput(format!(
                "degree {degree} fit needs at least {} points, got {n}",
                degree + 1
            )));
        }
        let tmin = series.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let tmax = series.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let center = 0.5 * (tmin + tmax);
        let scale = (0.5 * (tmax - tmin)).max(f64::MIN_POSITIVE);
        let cols = degree + 1;
        let mut v = DMatrix::zeros(n, cols);
        let mut b = DVector::zeros(n);
        for (i, &(t, y)) in series.iter().enumerate() {
            let s = (t - center) / scale;
            let mut p = 1.0;
            for j in 0..cols {
                v[(i, j)] = p;
                p *= s;
            }
            b[i] = y;
        }
        let qr = v.qr();
        let r = qr.r();
        let diag: Vec<f64> = (0..cols).map(|i| r[(i, i)].abs()).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
        if !(condition < 1e12) {
            return Err(Error::RankDeficient { condition });
        }
        let qtb = qr.q().transpose() * b;
        let coeffs = r
            .solve_upper_triangular(&qtb)
            .ok_or(Error::RankDeficient { condition })?;
        Ok(PolyFit {
            center,
            scale,
            coeffs: coeffs.iter().cloned().collect(),
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let s = (t - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }
}

/// Fits a degree-`degree` polynomial to `series` and evaluates it at `horizon`.
pub fn forecast_polyfit(
    series: &[(f64, f64)],
    degree: usize,
    horizon: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let fit = PolyFit::fit(series, degree)?;
    Ok(horizon.iter().map(|&t| (t, fit.eval(t))).collect())
}
