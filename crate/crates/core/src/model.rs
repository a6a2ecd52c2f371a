//! Structured nonlinear epidemic models `ẋ = A x + G f(Hx, u)`, `y = C x`.
//!
//! The SIDHER instance uses the state ordering (S, I, D, H, E, R) and the
//! output ordering y₁…y₁₀ = (νS, τI, D, ρD, φD, H, σH, ξH, E, S+I+R).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_singular_value_row_major, DenseMatrix};

pub const PARAM_NAMES: [&str; 9] = [
    "beta", "gamma", "rho", "sigma", "xi", "lambda", "phi", "tau", "nu",
];
pub const STATE_NAMES: [&str; 6] = ["S", "I", "D", "H", "E", "R"];

/// SIDHER rate parameters, all in 1/day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub sigma: f64,
    pub xi: f64,
    pub lambda: f64,
    pub phi: f64,
    pub tau: f64,
    pub nu: f64,
}

impl ParameterVector {
    /// Rates used to generate the synthetic data of the reference experiment.
    pub fn reference_truth() -> Self {
        ParameterVector {
            beta: 0.35,
            gamma: 0.1,
            rho: 0.05,
            sigma: 0.04,
            xi: 0.02,
            lambda: 0.0167,
            phi: 0.1429,
            tau: 0.3,
            nu: 0.01,
        }
    }

    /// Published estimates for the reference experiment.
    pub fn reference_estimate() -> Self {
        ParameterVector {
            beta: 0.3530,
            gamma: 0.0981,
            rho: 0.0501,
            sigma: 0.0399,
            xi: 0.0202,
            lambda: 0.0383,
            phi: 0.1428,
            tau: 0.2757,
            nu: 0.0100,
        }
    }

    pub fn zeros() -> Self {
        Self::from_array([0.0; 9])
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.beta,
            self.gamma,
            self.rho,
            self.sigma,
            self.xi,
            self.lambda,
            self.phi,
            self.tau,
            self.nu,
        ]
    }

    pub fn from_array(v: [f64; 9]) -> Self {
        ParameterVector {
            beta: v[0],
            gamma: v[1],
            rho: v[2],
            sigma: v[3],
            xi: v[4],
            lambda: v[5],
            phi: v[6],
            tau: v[7],
            nu: v[8],
        }
    }

    pub fn index_of(name: &str) -> Option<usize> {
        PARAM_NAMES.iter().position(|n| *n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::index_of(name).map(|i| self.to_array()[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = Self::index_of(name).ok_or_else(|| Error::InvalidParameter {
            field: name.to_string(),
            reason: "unknown parameter name".into(),
        })?;
        let mut a = self.to_array();
        a[i] = value;
        *self = Self::from_array(a);
        Ok(())
    }

    /// β ≥ 0, every other rate in [0, 1].
    pub fn validate(&self) -> Result<()> {
        for (name, v) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !v.is_finite() {
                return Err(Error::InvalidParameter {
                    field: name.to_string(),
                    reason: format!("non-finite value {v}"),
                });
            }
            if v < 0.0 {
                return Err(Error::InvalidParameter {
                    field: name.to_string(),
                    reason: format!("negative value {v}"),
                });
            }
            if *name != "beta" && v > 1.0 {
                return Err(Error::InvalidParameter {
                    field: name.to_string(),
                    reason: format!("value {v} exceeds 1"),
                });
            }
        }
        Ok(())
    }
}

/// The nonlinearity `f(Hx, u)` together with its Jacobians.
pub trait Nonlinearity: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// n_H
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// n_f
    fn output_dim(&self) -> usize;
    fn eval(&self, hx: &[f64], u: &[f64], out: &mut [f64]);
    /// Row-major `n_f × n_H` Jacobian ∂f/∂(Hx).
    fn jacobian(&self, hx: &[f64], u: &[f64], jac: &mut [f64]);
    /// Row-major `n_f × n_u` Jacobian ∂f/∂u; central differences by default.
    fn input_jacobian(&self, hx: &[f64], u: &[f64], jac: &mut [f64]) {
        let (n_f, n_u) = (self.output_dim(), self.input_dim());
        let mut up = u.to_vec();
        let mut fp = vec![0.0; n_f];
        let mut fm = vec![0.0; n_f];
        for j in 0..n_u {
            let h = 1e-6 * u[j].abs().max(1.0);
            up[j] = u[j] + h;
            self.eval(hx, &up, &mut fp);
            up[j] = u[j] - h;
            self.eval(hx, &up, &mut fm);
            up[j] = u[j];
            for i in 0..n_f {
                jac[i * n_u + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }
}

/// `f(S, I, H; u) = [SI, SI·u₁, H·u₂, I·u₃, S·u₄]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SidherNonlinearity;

impl Nonlinearity for SidherNonlinearity {
    fn name(&self) -> &str {
        "sidher_f"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        4
    }
    fn output_dim(&self) -> usize {
        5
    }
    fn eval(&self, hx: &[f64], u: &[f64], out: &mut [f64]) {
        let (s, i, h) = (hx[0], hx[1], hx[2]);
        let si = s * i;
        out[0] = si;
        out[1] = si * u[0];
        out[2] = h * u[1];
        out[3] = i * u[2];
        out[4] = s * u[3];
    }
    fn jacobian(&self, hx: &[f64], u: &[f64], jac: &mut [f64]) {
        let (s, i) = (hx[0], hx[1]);
        jac.copy_from_slice(&[
            i,
            s,
            0.0,
            i * u[0],
            s * u[0],
            0.0,
            0.0,
            0.0,
            u[1],
            0.0,
            u[2],
            0.0,
            u[3],
            0.0,
            0.0,
        ]);
    }
    fn input_jacobian(&self, hx: &[f64], _u: &[f64], jac: &mut [f64]) {
        let (s, i, h) = (hx[0], hx[1], hx[2]);
        jac.fill(0.0);
        jac[4] = s * i;
        jac[2 * 4 + 1] = h;
        jac[3 * 4 + 2] = i;
        jac[4 * 4 + 3] = s;
    }
}

/// `f ≡ 0` with arbitrary dimensions; used for linear models.
#[derive(Debug, Clone, Copy)]
pub struct ZeroNonlinearity {
    pub n_h: usize,
    pub n_u: usize,
    pub n_f: usize,
}

impl Nonlinearity for ZeroNonlinearity {
    fn name(&self) -> &str {
        "zero"
    }
    fn state_dim(&self) -> usize {
        self.n_h
    }
    fn input_dim(&self) -> usize {
        self.n_u
    }
    fn output_dim(&self) -> usize {
        self.n_f
    }
    fn eval(&self, _hx: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    fn jacobian(&self, _hx: &[f64], _u: &[f64], jac: &mut [f64]) {
        jac.iter_mut().for_each(|v| *v = 0.0);
    }
    fn input_jacobian(&self, _hx: &[f64], _u: &[f64], jac: &mut [f64]) {
        jac.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Registered nonlinearities addressable by name from model documents.
pub fn lookup_nonlinearity(
    name: &str,
    n_h: usize,
    n_u: usize,
    n_f: usize,
) -> Result<Arc<dyn Nonlinearity>> {
    match name {
        "sidher_f" => Ok(Arc::new(SidherNonlinearity)),
        "zero" => Ok(Arc::new(ZeroNonlinearity { n_h, n_u, n_f })),
        other => Err(Error::UnknownNonlinearity(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_g: usize,
    pub n_f: usize,
    pub n_h: usize,
}

#[derive(Clone)]
pub struct StructuredModel {
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    c: DMatrix<f64>,
    h: DMatrix<f64>,
    f: Arc<dyn Nonlinearity>,
    theta: Option<ParameterVector>,
    sparse: Arc<SparsePattern>,
}

/// Nonzeros of `A`, `G`, `C` in row-major order and the states picked by `H`.
#[derive(Debug)]
struct SparsePattern {
    sel: Vec<usize>,
    a: Vec<(usize, usize, f64)>,
    g: Vec<(usize, usize, f64)>,
    c: Vec<(usize, usize, f64)>,
}

fn nonzeros(m: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if m[(i, j)] != 0.0 {
                out.push((i, j, m[(i, j)]));
            }
        }
    }
    out
}

impl fmt::Debug for StructuredModel {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("StructuredModel")
            .field("dims", &self.dims())
            .field("f", &self.f.name())
            .field("theta", &self.theta)
            .finish()
    }
}

/// Per-call buffers for allocation-free right-hand-side evaluation.
#[derive(Debug, Clone)]
pub struct ModelScratch {
    hx: Vec<f64>,
    fv: Vec<f64>,
}

impl StructuredModel {
    pub fn new(
        a: DMatrix<f64>,
        g: DMatrix<f64>,
        c: DMatrix<f64>,
        h: DMatrix<f64>,
        f: Arc<dyn Nonlinearity>,
        theta: Option<ParameterVector>,
    ) -> Result<Self> {
        let n_x = a.nrows();
        if a.ncols() != n_x {
            return Err(Error::dims("A columns", n_x, a.ncols()));
        }
        if g.nrows() != n_x {
            return Err(Error::dims("G rows", n_x, g.nrows()));
        }
        if g.ncols() != f.output_dim() {
            return Err(Error::dims("G columns vs n_f", f.output_dim(), g.ncols()));
        }
        if c.ncols() != n_x {
            return Err(Error::dims("C columns", n_x, c.ncols()));
        }
        if h.ncols() != n_x {
            return Err(Error::dims("H columns", n_x, h.ncols()));
        }
        if h.nrows() != f.state_dim() {
            return Err(Error::dims("H rows vs n_H", f.state_dim(), h.nrows()));
        }
        for i in 0..h.nrows() {
            let row = h.row(i);
            if row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::InvalidInput(format!("H row {i} is not binary")));
            }
            if row.iter().filter(|v| **v == 1.0).count() != 1 {
                return Err(Error::InvalidInput(format!(
                    "H row {i} must select exactly one state"
                )));
            }
        }
        let sparse = Arc::new(SparsePattern {
            sel: (0..h.nrows())
                .map(|i| (0..n_x).find(|&j| h[(i, j)] == 1.0).expect("validated"))
                .collect(),
            a: nonzeros(&a),
            g: nonzeros(&g),
            c: nonzeros(&c),
        });
        Ok(StructuredModel {
            a,
            g,
            c,
            h,
            f,
            theta,
            sparse,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn nonlinearity(&self) -> &Arc<dyn Nonlinearity> {
        &self.f
    }

    pub fn theta(&self) -> Option<&ParameterVector> {
        self.theta.as_ref()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_x: self.a.nrows(),
            n_u: self.f.input_dim(),
            n_y: self.c.nrows(),
            n_g: self.g.ncols(),
            n_f: self.f.output_dim(),
            n_h: self.h.nrows(),
        }
    }

    /// Index of the state coordinate picked by each row of `H`.
    pub fn selected_states(&self) -> Vec<usize> {
        self.sparse.sel.clone()
    }

    pub fn scratch(&self) -> ModelScratch {
        ModelScratch {
            hx: vec![0.0; self.h.nrows()],
            fv: vec![0.0; self.f.output_dim()],
        }
    }

    /// `dx = A x + G f(Hx, u)` without bounds checks beyond debug assertions.
    pub fn rhs_into(&self, x: &[f64], u: &[f64], dx: &mut [f64], ws: &mut ModelScratch) {
        for (hx, &j) in ws.hx.iter_mut().zip(&self.sparse.sel) {
            *hx = x[j];
        }
        self.f.eval(&ws.hx, u, &mut ws.fv);
        self.lin_plus_g(x, &ws.fv, dx);
    }

    /// `dx = A x + G fv` for a precomputed nonlinearity value.
    pub fn lin_plus_g(&self, x: &[f64], fv: &[f64], dx: &mut [f64]) {
        dx.fill(0.0);
        for &(i, j, v) in &self.sparse.a {
            dx[i] += v * x[j];
        }
        for &(i, k, v) in &self.sparse.g {
            dx[i] += v * fv[k];
        }
    }

    pub fn output_into(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for &(i, j, v) in &self.sparse.c {
            y[i] += v * x[j];
        }
    }

    pub fn eval_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let d = self.dims();
        if x.len() != d.n_x {
            return Err(Error::dims("state vector", d.n_x, x.len()));
        }
        if u.len() != d.n_u {
            return Err(Error::dims("input vector", d.n_u, u.len()));
        }
        let mut dx = vec![0.0; d.n_x];
        let mut ws = self.scratch();
        self.rhs_into(x, u, &mut dx, &mut ws);
        Ok(dx)
    }

    pub fn eval_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dims();
        if x.len() != d.n_x {
            return Err(Error::dims("state vector", d.n_x, x.len()));
        }
        let mut y = vec![0.0; d.n_y];
        self.output_into(x, &mut y);
        Ok(y)
    }

    pub fn select(&self, x: &[f64]) -> Vec<f64> {
        (0..self.h.nrows())
            .map(|i| (0..x.len()).map(|j| self.h[(i, j)] * x[j]).sum())
            .collect()
    }

    /// Copy with a different output matrix (used to drop or zero outputs).
    pub fn with_output_matrix(&self, c: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.g.clone(),
            c,
            self.h.clone(),
            self.f.clone(),
            self.theta,
        )
    }

    /// Keep only the listed output rows (0-based).
    pub fn with_outputs(&self, rows: &[usize]) -> Result<Self> {
        let n_x = self.a.nrows();
        let mut c = DMatrix::zeros(rows.len(), n_x);
        for (k, &r) in rows.iter().enumerate() {
            if r >= self.c.nrows() {
                return Err(Error::InvalidInput(format!("output row {r} out of range")));
            }
            c.set_row(k, &self.c.row(r));
        }
        self.with_output_matrix(c)
    }

    /// SHA-256 (hex) of the JSON encoding of `(A, G, C, H)`.
    pub fn matrix_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mats = [&self.a, &self.g, &self.c, &self.h].map(DenseMatrix::from);
        let bytes = serde_json::to_vec(&mats).expect("matrices serialize");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            dims: self.dims(),
            a: DenseMatrix::from(&self.a),
            g: DenseMatrix::from(&self.g),
            c: DenseMatrix::from(&self.c),
            h: DenseMatrix::from(&self.h),
            theta: self.theta,
            nonlinearity: self.f.name().to_string(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let d = doc.dims;
        let f = lookup_nonlinearity(&doc.nonlinearity, d.n_h, d.n_u, d.n_f)?;
        let model = Self::new(
            doc.a.to_matrix()?,
            doc.g.to_matrix()?,
            doc.c.to_matrix()?,
            doc.h.to_matrix()?,
            f,
            doc.theta,
        )?;
        if model.dims() != d {
            return Err(Error::InvalidInput(format!(
                "declared dims {:?} disagree with matrices {:?}",
                d,
                model.dims()
            )));
        }
        Ok(model)
    }
}

/// JSON form of a model: dims, dense row-major matrices, named θ and the
/// registered name of the nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub dims: ModelDims,
    #[serde(rename = "A")]
    pub a: DenseMatrix,
    #[serde(rename = "G")]
    pub g: DenseMatrix,
    #[serde(rename = "C")]
    pub c: DenseMatrix,
    #[serde(rename = "H")]
    pub h: DenseMatrix,
    pub theta: Option<ParameterVector>,
    pub nonlinearity: String,
}

/// SIDHER matrices for the given rates.
pub fn build_sidher(theta: &ParameterVector) -> Result<StructuredModel> {
    theta.validate()?;
    let ParameterVector {
        beta,
        gamma,
        rho,
        sigma,
        xi,
        lambda,
        phi,
        tau,
        nu,
    } = *theta;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(6, 6, &[
        0.0, 0.0,    0.0,          0.0, 0.0, lambda,
        0.0, -gamma, 0.0,          0.0, 0.0, 0.0,
        0.0, 0.0,    -(rho + phi), 0.0, 0.0, 0.0,
        0.0, 0.0,    phi,          -xi, 0.0, 0.0,
        0.0, 0.0,    0.0,          xi,  0.0, 0.0,
        0.0, gamma,  rho,          0.0, 0.0, -lambda,
    ]);
    #[rustfmt::skip]
    let g = DMatrix::from_row_slice(6, 5, &[
        -beta, beta,  0.0,         0.0,  -nu,
        beta,  -beta, 0.0,         -tau, 0.0,
        0.0,   0.0,   0.0,         tau,  0.0,
        0.0,   0.0,   -sigma + xi, 0.0,  0.0,
        0.0,   0.0,   -xi,         0.0,  0.0,
        0.0,   0.0,   sigma,       0.0,  nu,
    ]);
    #[rustfmt::skip]
    let c = DMatrix::from_row_slice(10, 6, &[
        nu,  0.0, 0.0, 0.0,   0.0, 0.0,
        0.0, tau, 0.0, 0.0,   0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,   0.0, 0.0,
        0.0, 0.0, rho, 0.0,   0.0, 0.0,
        0.0, 0.0, phi, 0.0,   0.0, 0.0,
        0.0, 0.0, 0.0, 1.0,   0.0, 0.0,
        0.0, 0.0, 0.0, sigma, 0.0, 0.0,
        0.0, 0.0, 0.0, xi,    0.0, 0.0,
        0.0, 0.0, 0.0, 0.0,   1.0, 0.0,
        1.0, 1.0, 0.0, 0.0,   0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let h = DMatrix::from_row_slice(3, 6, &[
        1.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 1.0, 0.0, 0.0,
    ]);
    StructuredModel::new(a, g, c, h, Arc::new(SidherNonlinearity), Some(*theta))
}

/// A parametrized family `θ ↦ model`, used wherever θ is perturbed or fitted.
pub trait ModelFamily: Send + Sync {
    fn n_params(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn build(&self, theta: &[f64]) -> Result<StructuredModel>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SidherFamily;

impl ModelFamily for SidherFamily {
    fn n_params(&self) -> usize {
        9
    }
    fn param_names(&self) -> Vec<String> {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }
    fn build(&self, theta: &[f64]) -> Result<StructuredModel> {
        if theta.len() != 9 {
            return Err(Error::dims("SIDHER parameter vector", 9, theta.len()));
        }
        let mut a = [0.0; 9];
        a.copy_from_slice(theta);
        build_sidher(&ParameterVector::from_array(a))
    }
}

/// SIDHER family with a fixed output selection (rows of the full output map).
#[derive(Debug, Clone)]
pub struct SidherOutputSubset {
    pub rows: Vec<usize>,
}

impl ModelFamily for SidherOutputSubset {
    fn n_params(&self) -> usize {
        9
    }
    fn param_names(&self) -> Vec<String> {
        SidherFamily.param_names()
    }
    fn build(&self, theta: &[f64]) -> Result<StructuredModel> {
        SidherFamily.build(theta)?.with_outputs(&self.rows)
    }
}

/// A model without parameters.
#[derive(Debug, Clone)]
pub struct FixedModel(pub StructuredModel);

impl ModelFamily for FixedModel {
    fn n_params(&self) -> usize {
        0
    }
    fn param_names(&self) -> Vec<String> {
        Vec::new()
    }
    fn build(&self, theta: &[f64]) -> Result<StructuredModel> {
        if !theta.is_empty() {
            return Err(Error::dims("fixed model parameters", 0, theta.len()));
        }
        Ok(self.0.clone())
    }
}

/// Compact domain 𝒳 × 𝒰 used for the Lipschitz bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub state_box: Vec<(f64, f64)>,
    pub input_box: Vec<(f64, f64)>,
    /// Additionally restrict x to the unit simplex.
    pub simplex: bool,
}

impl Domain {
    pub fn sidher_box() -> Self {
        Domain {
            state_box: vec![(0.0, 1.0); 6],
            input_box: sidher_input_bounds(),
            simplex: false,
        }
    }

    pub fn sidher_simplex() -> Self {
        Domain {
            simplex: true,
            ..Self::sidher_box()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, (lo, hi)) in self.state_box.iter().chain(&self.input_box).enumerate() {
            if !(lo <= hi) {
                return Err(Error::InvalidInput(format!(
                    "empty interval [{lo}, {hi}] at domain coordinate {k}"
                )));
            }
        }
        if self.simplex {
            let min_sum: f64 = self.state_box.iter().map(|b| b.0.max(0.0)).sum();
            if min_sum > 1.0 || self.state_box.iter().any(|b| b.1 < 0.0) {
                return Err(Error::InvalidInput(
                    "state box does not intersect the unit simplex".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Actuator limits: u₁ ∈ [0,1], u₂ ∈ [0,0.9], u₃ ∈ [0.1,0.7], u₄ ∈ [0,0.7].
pub fn sidher_input_bounds() -> Vec<(f64, f64)> {
    vec![(0.0, 1.0), (0.0, 0.9), (0.1, 0.7), (0.0, 0.7)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub argmax_hx: Vec<f64>,
    pub argmax_u: Vec<f64>,
    pub evaluations: usize,
}

/// One coordinate of the search space (selected state or input channel).
#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    active: bool,
}

struct LipEval<'a> {
    f: &'a dyn Nonlinearity,
    n_h: usize,
    n_f: usize,
    simplex: bool,
}

impl LipEval<'_> {
    /// `σ_max` at `point`, or `None` when the point is outside the domain or
    /// a bound on `σ_max²` (trace and Gershgorin of the Gram matrix) shows it
    /// cannot exceed `floor`.
    fn sigma_above(&self, point: &[f64], jac: &mut [f64], gram: &mut [f64], floor: f64) -> Option<f64> {
        let (hx, u) = point.split_at(self.n_h);
        if self.simplex && hx.iter().sum::<f64>() > 1.0 + 1e-12 {
            return None;
        }
        self.f.jacobian(hx, u, jac);
        if floor > 0.0 {
            let (n, m) = (self.n_h, self.n_f);
            let mut trace = 0.0;
            let mut gersh = 0.0f64;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    let g: f64 = (0..m).map(|r| jac[r * n + i] * jac[r * n + j]).sum();
                    row += g.abs();
                    if i == j {
                        trace += g;
                    }
                }
                gersh = gersh.max(row);
            }
            // Rounding slack keeps the bound a true upper bound on the computed value.
            if trace.min(gersh) * (1.0 + 1e-9) < floor * floor {
                return None;
            }
        }
        Some(max_singular_value_row_major(jac, self.n_f, self.n_h, gram))
    }
}

/// Grid estimate of `ℓ = sup σ_max(∂f/∂(Hx))` over the domain.
///
/// Axes on which the Jacobian does not depend are frozen; the remaining ones are
/// sampled with `grid_density` points (box corners included), and a finer local
/// grid is then laid around the best cell.
pub fn estimate_lipschitz(
    model: &StructuredModel,
    domain: &Domain,
    grid_density: usize,
) -> Result<LipschitzEstimate> {
    if grid_density < 2 {
        return Err(Error::InvalidInput("grid_density must be at least 2".into()));
    }
    domain.validate()?;
    let d = model.dims();
    if domain.state_box.len() != d.n_x {
        return Err(Error::dims("domain state box", d.n_x, domain.state_box.len()));
    }
    if domain.input_box.len() != d.n_u {
        return Err(Error::dims("domain input box", d.n_u, domain.input_box.len()));
    }
    let f = model.f.as_ref();
    let sel = model.selected_states();
    let mut axes: Vec<Axis> = sel
        .iter()
        .map(|&j| {
            let (lo, hi) = domain.state_box[j];
            if domain.simplex {
                (lo.max(0.0), hi.min(1.0))
            } else {
                (lo, hi)
            }
        })
        .chain(domain.input_box.iter().cloned())
        .map(|(lo, hi)| Axis {
            lo,
            hi,
            active: true,
        })
        .collect();
    let dim = axes.len();
    let ev = LipEval {
        f,
        n_h: d.n_h,
        n_f: d.n_f,
        simplex: domain.simplex,
    };

    // Axis activity: does the Jacobian change along the axis anywhere?
    let mut rng = ChaCha8Rng::seed_from_u64(0x11b5);
    let mut jac_a = vec![0.0; d.n_f * d.n_h];
    let mut jac_b = jac_a.clone();
    for k in 0..dim {
        let mut active = false;
        for _ in 0..16 {
            let mut p: Vec<f64> = axes.iter().map(|a| rng.gen_range(a.lo..=a.hi)).collect();
            p[k] = axes[k].lo;
            let (hx, u) = p.split_at(d.n_h);
            f.jacobian(hx, u, &mut jac_a);
            p[k] = axes[k].hi;
            let (hx, u) = p.split_at(d.n_h);
            f.jacobian(hx, u, &mut jac_b);
            if jac_a.iter().zip(&jac_b).any(|(a, b)| (a - b).abs() > 1e-14) {
                active = true;
                break;
            }
        }
        axes[k].active = active && axes[k].hi > axes[k].lo;
    }

    let levels: Vec<Vec<f64>> = axes
        .iter()
        .map(|a| {
            if a.active {
                (0..grid_density)
                    .map(|i| a.lo + (a.hi - a.lo) * i as f64 / (grid_density - 1) as f64)
                    .collect()
            } else {
                vec![a.lo]
            }
        })
        .collect();
    let (best_val, best_pt, n_grid) = grid_max(&ev, &levels);
    let mut best_val = best_val;
    let mut best_pt = best_pt.ok_or_else(|| {
        Error::InvalidInput("no admissible grid point in the domain".into())
    })?;

    // Local refinement: five points per active axis across the neighbouring cells.
    let refine: Vec<Vec<f64>> = axes
        .iter()
        .zip(&best_pt)
        .map(|(a, &c)| {
            if !a.active {
                return vec![c];
            }
            let w = (a.hi - a.lo) / (grid_density - 1) as f64;
            let lo = (c - w).max(a.lo);
            let hi = (c + w).min(a.hi);
            (0..5).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
        })
        .collect();
    let (ref_val, ref_pt, n_ref) = grid_max(&ev, &refine);
    if let Some(p) = ref_pt {
        if ref_val > best_val {
            best_val = ref_val;
            best_pt = p;
        }
    }
    let (hx, u) = best_pt.split_at(d.n_h);
    Ok(LipschitzEstimate {
        value: best_val,
        argmax_hx: hx.to_vec(),
        argmax_u: u.to_vec(),
        evaluations: n_grid + n_ref,
    })
}

/// Maximum of σ over the tensor grid `levels`; ties resolve to the first index
/// in lexicographic order so the result is independent of scheduling.
fn grid_max(ev: &LipEval<'_>, levels: &[Vec<f64>]) -> (f64, Option<Vec<f64>>, usize) {
    let dim = levels.len();
    let total: usize = levels.iter().map(|l| l.len()).product();
    let first = levels[0].len();
    let per_first = total / first;
    let n_jac = ev.n_f * ev.n_h;
    let n_gram = ev.n_h * ev.n_h;
    let split = ev.n_h.clamp(1, dim);
    let tail: usize = levels[split..].iter().map(|l| l.len()).product();
    let results: Vec<(f64, usize)> = (0..first)
        .into_par_iter()
        .map(|i0| {
            let mut jac = vec![0.0; n_jac];
            let mut gram = vec![0.0; n_gram];
            let mut idx = vec![0usize; dim];
            let mut point = vec![0.0; dim];
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            idx[0] = i0;
            for k in 0..dim {
                point[k] = levels[k][idx[k]];
            }
            // Odometer over the trailing axes; `flat` stays the lexicographic index.
            let step = |from: usize, idx: &mut [usize], point: &mut [f64]| {
                for k in (1..=from).rev() {
                    idx[k] += 1;
                    if idx[k] < levels[k].len() {
                        point[k] = levels[k][idx[k]];
                        return;
                    }
                    idx[k] = 0;
                    point[k] = levels[k][0];
                }
            };
            let mut flat = 0;
            while flat < per_first {
                // Every point of an input block shares the states; skip the block
                // when they leave the simplex.
                if ev.simplex && flat % tail == 0 && point[..split].iter().sum::<f64>() > 1.0 + 1e-12 {
                    flat += tail;
                    if split < 2 {
                        break;
                    }
                    step(split - 1, &mut idx, &mut point);
                    continue;
                }
                if let Some(s) = ev.sigma_above(&point, &mut jac, &mut gram, best.0) {
                    if s > best.0 {
                        best = (s, i0 * per_first + flat);
                    }
                }
                flat += 1;
                step(dim - 1, &mut idx, &mut point);
            }
            best
        })
        .collect();
    let best = results
        .into_iter()
        .fold((f64::NEG_INFINITY, usize::MAX), |acc, r| {
            if r.0 > acc.0 || (r.0 == acc.0 && r.1 < acc.1) {
                r
            } else {
                acc
            }
        });
    if best.1 == usize::MAX {
        return (0.0, None, total);
    }
    let mut rem = best.1;
    let mut point = vec![0.0; dim];
    for k in (0..dim).rev() {
        point[k] = levels[k][rem % levels[k].len()];
        rem /= levels[k].len();
    }
    (best.0, Some(point), total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_singular_value;

    /// Scalar transcription of the SIDHER equations.
    fn sidher_scalar(th: &ParameterVector, x: &[f64], u: &[f64]) -> [f64; 6] {
        let (s, i, d, h, _e, r) = (x[0], x[1], x[2], x[3], x[4], x[5]);
        let inf = th.beta * s * i * (1.0 - u[0]);
        [
            th.lambda * r - inf - th.nu * s * u[3],
            -th.gamma * i + inf - th.tau * i * u[2],
            -(th.rho + th.phi) * d + th.tau * i * u[2],
            -th.xi * h * (1.0 - u[1]) + th.phi * d - th.sigma * h * u[1],
            th.xi * h * (1.0 - u[1]),
            -th.lambda * r + th.gamma * i + th.rho * d + th.nu * s * u[3] + th.sigma * h * u[1],
        ]
    }

    #[test]
    fn sidher_diagonal_entries() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        assert_eq!(m.a[(1, 1)], -0.1);
        assert!((m.a[(2, 2)] + 0.1929).abs() < 1e-15);
        let d = m.dims();
        assert_eq!((d.n_x, d.n_u, d.n_y, d.n_f, d.n_h, d.n_g), (6, 4, 10, 5, 3, 5));
    }

    #[test]
    fn zero_parameters_give_zero_rate_matrices() {
        let m = build_sidher(&ParameterVector::zeros()).unwrap();
        assert!(m.a.iter().all(|v| *v == 0.0));
        assert!(m.g.iter().all(|v| *v == 0.0));
        for r in [0, 1, 3, 4, 6, 7] {
            assert!(m.c.row(r).iter().all(|v| *v == 0.0), "row {r}");
        }
    }

    #[test]
    fn column_sums_vanish() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        for j in 0..6 {
            assert!(m.a.column(j).sum().abs() < 1e-15);
        }
        for j in 0..5 {
            assert!(m.g.column(j).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_parameters_are_named() {
        let mut th = ParameterVector::reference_truth();
        th.gamma = 1.5;
        match build_sidher(&th) {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "gamma"),
            other => panic!("unexpected {other:?}"),
        }
        th = ParameterVector::reference_truth();
        th.beta = -0.1;
        match build_sidher(&th) {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "beta"),
            other => panic!("unexpected {other:?}"),
        }
        th.beta = 3.0;
        assert!(build_sidher(&th).is_ok());
    }

    #[test]
    fn dynamics_examples() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        let dx = m.eval_dynamics(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        let dx = m.eval_dynamics(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        let want = [-0.0875, 0.0375, 0.0, 0.0, 0.0, 0.05];
        for (a, b) in dx.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{dx:?}");
        }
        assert!(m.eval_dynamics(&[0.0; 5], &[0.0; 4]).is_err());
        assert!(m.eval_dynamics(&[0.0; 6], &[0.0; 3]).is_err());
    }

    #[test]
    fn dynamics_match_scalar_equations() {
        let th = ParameterVector::reference_truth();
        let m = build_sidher(&th).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
            let u: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            let got = m.eval_dynamics(&x, &u).unwrap();
            let want = sidher_scalar(&th, &x, &u);
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-14);
            }
            assert!(got.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[derive(Debug)]
    struct NumericSidher;

    impl Nonlinearity for NumericSidher {
        fn name(&self) -> &str {
            "numeric"
        }
        fn state_dim(&self) -> usize {
            3
        }
        fn input_dim(&self) -> usize {
            4
        }
        fn output_dim(&self) -> usize {
            5
        }
        fn eval(&self, hx: &[f64], u: &[f64], out: &mut [f64]) {
            SidherNonlinearity.eval(hx, u, out)
        }
        fn jacobian(&self, hx: &[f64], u: &[f64], jac: &mut [f64]) {
            SidherNonlinearity.jacobian(hx, u, jac)
        }
    }

    #[test]
    fn input_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut exact = [0.0; 20];
        let mut numeric = [0.0; 20];
        for _ in 0..100 {
            let hx: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let u: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            SidherNonlinearity.input_jacobian(&hx, &u, &mut exact);
            NumericSidher.input_jacobian(&hx, &u, &mut numeric);
            for (a, b) in exact.iter().zip(&numeric) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_examples() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        let y = m.eval_output(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut want = [0.0; 10];
        want[0] = 0.01;
        want[9] = 1.0;
        assert_eq!(y, want);
        assert!(m.eval_output(&[0.0; 6]).unwrap().iter().all(|v| *v == 0.0));
        let x = [0.3, 0.1, 0.05, 0.15, 0.1, 0.3];
        let y = m.eval_output(&x).unwrap();
        assert!((y[2] + y[5] + y[8] + y[9] - 1.0).abs() < 1e-15);
        assert!(m.eval_output(&[0.0; 7]).is_err());
    }

    #[test]
    fn lipschitz_of_zero_nonlinearity() {
        let f = Arc::new(ZeroNonlinearity { n_h: 1, n_u: 1, n_f: 1 });
        let m = StructuredModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            f,
            None,
        )
        .unwrap();
        let dom = Domain {
            state_box: vec![(0.0, 1.0); 2],
            input_box: vec![(0.0, 1.0)],
            simplex: false,
        };
        assert_eq!(estimate_lipschitz(&m, &dom, 5).unwrap().value, 0.0);
    }

    #[test]
    fn grid_max_matches_exhaustive_scan() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        let levels: Vec<Vec<f64>> = vec![
            vec![0.0, 0.3, 0.6, 1.0],
            vec![0.0, 0.45, 0.9],
            vec![0.0, 0.5],
            vec![0.2, 1.0],
            vec![0.0, 0.9],
            vec![0.1, 0.4, 0.7],
            vec![0.0, 0.7],
        ];
        for simplex in [false, true] {
            let ev = LipEval {
                f: m.f.as_ref(),
                n_h: 3,
                n_f: 5,
                simplex,
            };
            let (val, pt, _) = grid_max(&ev, &levels);
            let (mut best, mut arg) = (f64::NEG_INFINITY, None);
            let total: usize = levels.iter().map(|l| l.len()).product();
            for flat in 0..total {
                let mut rem = flat;
                let mut p = vec![0.0; levels.len()];
                for k in (0..levels.len()).rev() {
                    p[k] = levels[k][rem % levels[k].len()];
                    rem /= levels[k].len();
                }
                if simplex && p[..3].iter().sum::<f64>() > 1.0 + 1e-12 {
                    continue;
                }
                let (hx, u) = p.split_at(3);
                let mut jac = vec![0.0; 15];
                m.f.jacobian(hx, u, &mut jac);
                let s = max_singular_value(&DMatrix::from_row_slice(5, 3, &jac));
                if s > best + 1e-12 {
                    best = s;
                    arg = Some(p);
                }
            }
            assert!((val - best).abs() < 1e-12, "{val} vs {best}");
            assert_eq!(pt, arg);
        }
    }

    #[test]
    fn lipschitz_box_and_simplex() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        let est = estimate_lipschitz(&m, &Domain::sidher_box(), 5).unwrap();
        assert!((est.value - 4.49f64.sqrt()).abs() < 1e-12, "{est:?}");
        assert_eq!(&est.argmax_hx[..2], &[1.0, 1.0]);
        // u2 only scales the decoupled H column, so it is not pinned by the maximum.
        let u = &est.argmax_u;
        assert_eq!((u[0], u[2], u[3]), (1.0, 0.7, 0.7));
        // Independent SVD of the corner Jacobian.
        #[rustfmt::skip]
        let corner = DMatrix::from_row_slice(5, 3, &[
            1.0, 1.0, 0.0,
            1.0, 1.0, 0.0,
            0.0, 0.0, 0.9,
            0.0, 0.7, 0.0,
            0.7, 0.0, 0.0,
        ]);
        assert!((max_singular_value(&corner) - est.value).abs() < 1e-12);

        let est = estimate_lipschitz(&m, &Domain::sidher_simplex(), 5).unwrap();
        assert!((est.value - 2.49f64.sqrt()).abs() < 1e-12, "{est:?}");
        let (s, i) = (est.argmax_hx[0], est.argmax_hx[1]);
        assert!((s, i) == (1.0, 0.0) || (s, i) == (0.0, 1.0));
    }

    #[test]
    fn lipschitz_rejects_bad_domains() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        let mut dom = Domain::sidher_box();
        assert!(estimate_lipschitz(&m, &dom, 1).is_err());
        dom.input_box[0] = (1.0, 0.0);
        assert!(estimate_lipschitz(&m, &dom, 3).is_err());
    }

    #[test]
    fn document_roundtrip() {
        let m = build_sidher(&ParameterVector::reference_truth()).unwrap();
        let doc = m.to_document();
        let text = serde_json::to_string(&doc).unwrap();
        let back = StructuredModel::from_document(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.a, m.a);
        assert_eq!(back.c, m.c);
        assert_eq!(back.f.name(), "sidher_f");
        let mut bad = doc.clone();
        bad.nonlinearity = "mystery".into();
        assert!(StructuredModel::from_document(&bad).is_err());
    }
}
