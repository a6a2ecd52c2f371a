//! Dense linear-algebra helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix as it appears in the JSON artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::dims(
                "dense matrix payload",
                self.rows * self.cols,
                self.data.len(),
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

impl From<&DMatrix<f64>> for DenseMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        DenseMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

/// `#[serde(with = "dense_serde")]` for `DMatrix<f64>` fields, stored as [`DenseMatrix`].
pub mod dense_serde {
    use super::DenseMatrix;
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        DenseMatrix::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        DenseMatrix::deserialize(d)?
            .to_matrix()
            .map_err(serde::de::Error::custom)
    }
}

/// Symmetrized copy `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Largest eigenvalue of a symmetric matrix stored row-major in `a` (n×n).
/// `a` is destroyed. Cyclic Jacobi, used in hot loops where allocation matters.
pub fn jacobi_max_eigenvalue(a: &mut [f64], n: usize) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    match n {
        0 => return 0.0,
        1 => return a[0],
        2 => {
            let (p, q, r) = (a[0], a[1], a[3]);
            let mid = 0.5 * (p + r);
            let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
            return mid + rad;
        }
        _ => {}
    }
    for _sweep in 0..50 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).fold(f64::NEG_INFINITY, f64::max)
}

/// Largest singular value of a row-major `rows × cols` matrix without allocating
/// beyond the caller-provided Gram scratch (`cols × cols`).
pub fn max_singular_value_row_major(m: &[f64], rows: usize, cols: usize, gram: &mut [f64]) -> f64 {
    for i in 0..cols {
        for j in i..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += m[r * cols + i] * m[r * cols + j];
            }
            gram[i * cols + j] = s;
            gram[j * cols + i] = s;
        }
    }
    jacobi_max_eigenvalue(&mut gram[..cols * cols], cols).max(0.0).sqrt()
}

/// Symmetric positive-definite solve with a diagonal shift fallback when the
/// Cholesky factorization breaks down.
pub fn spd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut shift = 1e-12 * scale;
    for _ in 0..12 {
        let mut hs = h.clone();
        for i in 0..hs.nrows() {
            hs[(i, i)] += shift;
        }
        if let Some(ch) = hs.cholesky() {
            return Some(ch.solve(rhs));
        }
        shift *= 100.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_nalgebra() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[4.0, 1.0, -2.0, 0.5, 1.0, 3.0, 0.0, 1.0, -2.0, 0.0, 5.0, 2.0, 0.5, 1.0, 2.0, 1.0],
        );
        let mut buf: Vec<f64> = m.transpose().iter().cloned().collect();
        let got = jacobi_max_eigenvalue(&mut buf, 4);
        assert!((got - max_eigenvalue(&m)).abs() < 1e-12);
    }

    #[test]
    fn row_major_singular_value() {
        let rows = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.9, 0.0, 0.7, 0.0, 0.7, 0.0, 0.0];
        let mut gram = [0.0; 9];
        let s = max_singular_value_row_major(&rows, 5, 3, &mut gram);
        let m = DMatrix::from_row_slice(5, 3, &rows);
        assert!((s - max_singular_value(&m)).abs() < 1e-12);
    }

    #[test]
    fn dense_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = DenseMatrix::from(&m);
        assert_eq!(d.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(d.to_matrix().unwrap(), m);
    }
}
