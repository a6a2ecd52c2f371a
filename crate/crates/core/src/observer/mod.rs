//! Robust observer synthesis for `ẋ = Âx + Ĝf(Hx, ū) + w`, `ȳ = Ĉx + v`.
//!
//! The observer
//!
//! ```text
//! ż = Mz + (ML + J)ȳ + NĜ f(q, ū),   x̂ = z + Lȳ,   q = Hx̂ + K(ȳ − Ĉx̂)
//! M = Â − LĈÂ − JĈ,   N = I − LĈ,   J = P⁻¹S,   L = P⁻¹R
//! ```
//!
//! is designed by minimizing μ subject to three LMIs in `(P, Q, R, S, K, μ)`:
//!
//! ```text
//! dissipation:  [sym(PÂ − RĈÂ − SĈ) + Q, (P − RĈ)Ĝ; ·ᵀ, −I] ≼ −εI
//! lipschitz:    [−Q, (H − KĈ)ᵀ; H − KĈ, −I/ℓ²] ≼ 0
//! attenuation:  [−μI, R; Rᵀ, −I] ≼ 0
//! ```
//!
//! with `P, Q ≻ 0`. The feasible set is unbounded (P along directions killed by
//! `Â` and `Ĝ`, S and K along the left null space of `Ĉ`), so the solver also
//! imposes `P ≼ p_max I`, `‖S‖ ≤ s_max`, `‖K‖ ≤ k_max` and `μ ≤ μ_max`.

mod run;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dense_serde, max_eigenvalue, min_eigenvalue, symmetrize};
use crate::model::StructuredModel;
use crate::sdp::{solve_lmi, LmiBlock, LmiProblem, SdpOptions, SdpStatus};

pub use run::{
    spearman,
    error_system_check, fit_exponential_decay, iss_decay_metrics, iss_experiment, run_observer,
    EquivalenceReport, IssReport, IssSample, ObserverRun, RunFailure,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdpBounds {
    pub p_max: f64,
    pub s_max: f64,
    pub k_max: f64,
    pub mu_max: f64,
}

impl Default for SdpBounds {
    fn default() -> Self {
        SdpBounds {
            p_max: 1.0,
            s_max: 100.0,
            k_max: 1000.0,
            mu_max: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    #[serde(with = "dense_serde")]
    pub a_hat: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub g_hat: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub c_hat: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub h: DMatrix<f64>,
    pub lipschitz: f64,
    /// ε in the dissipation inequality.
    pub margin: f64,
    pub bounds: SdpBounds,
    pub model_hash: String,
}

/// Decision variables of the observer SDP.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub mu: f64,
}

struct Layout {
    n_x: usize,
    n_y: usize,
    n_h: usize,
    p: usize,
    q: usize,
    r: usize,
    s: usize,
    /// `None` when K is fixed at zero.
    k: Option<usize>,
    mu: usize,
    n: usize,
}

impl Layout {
    fn sym_index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // Row-major upper triangle.
        i * self.n_x - i * (i + 1) / 2 + j
    }
}

pub fn assemble_sdp(model_hat: &StructuredModel, lipschitz: f64, margin: f64) -> Result<SdpProblem> {
    if !(margin > 0.0) {
        return Err(Error::InvalidParameter {
            field: "margin".into(),
            reason: "must be positive".into(),
        });
    }
    if !(lipschitz >= 0.0) || !lipschitz.is_finite() {
        return Err(Error::InvalidParameter {
            field: "lipschitz".into(),
            reason: "must be finite and nonnegative".into(),
        });
    }
    Ok(SdpProblem {
        a_hat: model_hat.a().clone(),
        g_hat: model_hat.g().clone(),
        c_hat: model_hat.c().clone(),
        h: model_hat.h().clone(),
        lipschitz,
        margin,
        bounds: SdpBounds::default(),
        model_hash: model_hat.matrix_hash(),
    })
}

impl SdpProblem {
    pub fn n_x(&self) -> usize {
        self.a_hat.nrows()
    }
    pub fn n_y(&self) -> usize {
        self.c_hat.nrows()
    }
    pub fn n_f(&self) -> usize {
        self.g_hat.ncols()
    }
    pub fn n_h(&self) -> usize {
        self.h.nrows()
    }

    /// Sizes of the dissipation, Lipschitz and attenuation blocks.
    pub fn block_sizes(&self) -> [usize; 3] {
        [
            self.n_x() + self.n_f(),
            self.n_x() + self.n_h(),
            self.n_x() + self.n_y(),
        ]
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_x();
        if self.a_hat.ncols() != n {
            return Err(Error::dims("Â columns", n, self.a_hat.ncols()));
        }
        if self.g_hat.nrows() != n {
            return Err(Error::dims("Ĝ rows", n, self.g_hat.nrows()));
        }
        if self.c_hat.ncols() != n {
            return Err(Error::dims("Ĉ columns", n, self.c_hat.ncols()));
        }
        if self.h.ncols() != n {
            return Err(Error::dims("H columns", n, self.h.ncols()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidParameter {
                field: "margin".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (n_x, n_y, n_h) = (self.n_x(), self.n_y(), self.n_h());
        let n_sym = n_x * (n_x + 1) / 2;
        let p = 0;
        let q = p + n_sym;
        let r = q + n_sym;
        let s = r + n_x * n_y;
        let mut next = s + n_x * n_y;
        let k = if self.lipschitz > 0.0 {
            let k = next;
            next += n_h * n_y;
            Some(k)
        } else {
            None
        };
        Layout {
            n_x,
            n_y,
            n_h,
            p,
            q,
            r,
            s,
            k,
            mu: next,
            n: next + 1,
        }
    }

    fn unpack(&self, x: &[f64]) -> Decision {
        let l = self.layout();
        let sym = |off: usize| {
            DMatrix::from_fn(l.n_x, l.n_x, |i, j| x[off + l.sym_index(i, j)])
        };
        Decision {
            p: sym(l.p),
            q: sym(l.q),
            r: DMatrix::from_fn(l.n_x, l.n_y, |i, j| x[l.r + i * l.n_y + j]),
            s: DMatrix::from_fn(l.n_x, l.n_y, |i, j| x[l.s + i * l.n_y + j]),
            k: match l.k {
                Some(off) => DMatrix::from_fn(l.n_h, l.n_y, |i, j| x[off + i * l.n_y + j]),
                None => DMatrix::zeros(l.n_h, l.n_y),
            },
            mu: x[l.mu],
        }
    }

    fn pack(&self, d: &Decision) -> Vec<f64> {
        let l = self.layout();
        let mut x = vec![0.0; l.n];
        for i in 0..l.n_x {
            for j in i..l.n_x {
                x[l.p + l.sym_index(i, j)] = d.p[(i, j)];
                x[l.q + l.sym_index(i, j)] = d.q[(i, j)];
            }
            for j in 0..l.n_y {
                x[l.r + i * l.n_y + j] = d.r[(i, j)];
                x[l.s + i * l.n_y + j] = d.s[(i, j)];
            }
        }
        if let Some(off) = l.k {
            for i in 0..l.n_h {
                for j in 0..l.n_y {
                    x[off + i * l.n_y + j] = d.k[(i, j)];
                }
            }
        }
        x[l.mu] = d.mu;
        x
    }

    /// The three constraint blocks in their `≼` form, unsymmetrized.
    pub fn constraint_blocks(&self, d: &Decision) -> [DMatrix<f64>; 3] {
        let (n_x, n_y, n_f, n_h) = (self.n_x(), self.n_y(), self.n_f(), self.n_h());
        let ca = &self.c_hat * &self.a_hat;
        let x = &d.p * &self.a_hat - &d.r * &ca - &d.s * &self.c_hat;
        let top_left = &x + x.transpose() + &d.q;
        let coupling = (&d.p - &d.r * &self.c_hat) * &self.g_hat;
        let mut b1 = DMatrix::zeros(n_x + n_f, n_x + n_f);
        b1.view_mut((0, 0), (n_x, n_x)).copy_from(&top_left);
        b1.view_mut((0, n_x), (n_x, n_f)).copy_from(&coupling);
        b1.view_mut((n_x, 0), (n_f, n_x)).copy_from(&coupling.transpose());
        b1.view_mut((n_x, n_x), (n_f, n_f))
            .copy_from(&(-DMatrix::identity(n_f, n_f)));

        let hk = &self.h - &d.k * &self.c_hat;
        let mut b2 = DMatrix::zeros(n_x + n_h, n_x + n_h);
        b2.view_mut((0, 0), (n_x, n_x)).copy_from(&(-&d.q));
        b2.view_mut((0, n_x), (n_x, n_h)).copy_from(&hk.transpose());
        b2.view_mut((n_x, 0), (n_h, n_x)).copy_from(&hk);
        let inv_l2 = if self.lipschitz > 0.0 {
            1.0 / (self.lipschitz * self.lipschitz)
        } else {
            f64::INFINITY
        };
        b2.view_mut((n_x, n_x), (n_h, n_h))
            .copy_from(&(-DMatrix::identity(n_h, n_h) * inv_l2));

        let mut b3 = DMatrix::zeros(n_x + n_y, n_x + n_y);
        b3.view_mut((0, 0), (n_x, n_x))
            .copy_from(&(-DMatrix::identity(n_x, n_x) * d.mu));
        b3.view_mut((0, n_x), (n_x, n_y)).copy_from(&d.r);
        b3.view_mut((n_x, 0), (n_y, n_x)).copy_from(&d.r.transpose());
        b3.view_mut((n_x, n_x), (n_y, n_y))
            .copy_from(&(-DMatrix::identity(n_y, n_y)));
        [b1, b2, b3]
    }

    /// All solver constraints as named `≽ 0` blocks.
    fn psd_blocks(&self, x: &[f64]) -> Vec<(&'static str, DMatrix<f64>)> {
        let d = self.unpack(x);
        let [b1, b2, b3] = self.constraint_blocks(&d);
        let (n_x, n_y, n_h) = (self.n_x(), self.n_y(), self.n_h());
        let eye = |n: usize| DMatrix::<f64>::identity(n, n);
        let norm_ball = |m: &DMatrix<f64>, radius: f64| {
            let (r, c) = m.shape();
            let mut b = DMatrix::zeros(r + c, r + c);
            b.view_mut((0, 0), (r, r)).copy_from(&(eye(r) * radius));
            b.view_mut((0, r), (r, c)).copy_from(m);
            b.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
            b.view_mut((r, r), (c, c)).copy_from(&(eye(c) * radius));
            b
        };
        let mut out = vec![
            ("dissipation", -b1 - eye(self.n_x() + self.n_f()) * self.margin),
        ];
        if self.lipschitz > 0.0 {
            out.push(("lipschitz", -b2));
        }
        out.push(("attenuation", -b3));
        out.push(("P ≻ 0", &d.p - eye(n_x) * self.margin));
        out.push(("Q ≻ 0", &d.q - eye(n_x) * self.margin));
        out.push(("P bound", eye(n_x) * self.bounds.p_max - &d.p));
        out.push(("S bound", norm_ball(&d.s, self.bounds.s_max)));
        if self.lipschitz > 0.0 {
            out.push(("K bound", norm_ball(&d.k, self.bounds.k_max)));
        }
        let _ = (n_y, n_h);
        out.push((
            "mu bound",
            DMatrix::from_element(1, 1, self.bounds.mu_max - d.mu),
        ));
        out
    }

    /// Linear-matrix-inequality form, with coefficients read off the affine map.
    pub fn to_lmi_problem(&self) -> LmiProblem {
        let l = self.layout();
        let zero = vec![0.0; l.n];
        let base = self.psd_blocks(&zero);
        let mut blocks: Vec<LmiBlock> = base
            .iter()
            .map(|(name, f0)| {
                let mut b = LmiBlock::new(name, f0.nrows());
                b.f0 = symmetrize(f0);
                b
            })
            .collect();
        let mut e = zero.clone();
        for j in 0..l.n {
            e[j] = 1.0;
            for (bi, (_, fj)) in self.psd_blocks(&e).into_iter().enumerate() {
                let coeff = symmetrize(&(fj - &base[bi].1));
                if coeff.iter().any(|v| *v != 0.0) {
                    blocks[bi].terms.push((j, coeff));
                }
            }
            e[j] = 0.0;
        }
        let mut c = vec![0.0; l.n];
        c[l.mu] = 1.0;
        LmiProblem {
            n_vars: l.n,
            c,
            blocks,
        }
    }

    fn initial_point(&self) -> Vec<f64> {
        let n_x = self.n_x();
        self.pack(&Decision {
            p: DMatrix::identity(n_x, n_x) * (0.5 * self.bounds.p_max),
            q: DMatrix::identity(n_x, n_x),
            r: DMatrix::zeros(n_x, self.n_y()),
            s: DMatrix::zeros(n_x, self.n_y()),
            k: DMatrix::zeros(self.n_h(), self.n_y()),
            mu: 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    #[serde(with = "dense_serde")]
    pub p: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub q: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub r: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub s: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub k: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub j: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub l: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub m: DMatrix<f64>,
    #[serde(with = "dense_serde")]
    pub n: DMatrix<f64>,
    pub mu: f64,
    pub lipschitz: f64,
    pub margin: f64,
    /// Hash of the `(Â, Ĝ, Ĉ, H)` the gains were designed for.
    pub model_hash: String,
}

impl ObserverGains {
    /// Derives `J, L, M, N` from the decision variables.
    pub fn from_decision(problem: &SdpProblem, d: &Decision) -> Result<Self> {
        let chol = d.p.clone().cholesky().ok_or_else(|| Error::InvalidParameter {
            field: "P".into(),
            reason: "not positive definite".into(),
        })?;
        let l = chol.solve(&d.r);
        let j = chol.solve(&d.s);
        let n_x = problem.n_x();
        let m = &problem.a_hat - &l * &problem.c_hat * &problem.a_hat - &j * &problem.c_hat;
        let n = DMatrix::identity(n_x, n_x) - &l * &problem.c_hat;
        Ok(ObserverGains {
            p: d.p.clone(),
            q: d.q.clone(),
            r: d.r.clone(),
            s: d.s.clone(),
            k: d.k.clone(),
            j,
            l,
            m,
            n,
            mu: d.mu,
            lipschitz: problem.lipschitz,
            margin: problem.margin,
            model_hash: problem.model_hash.clone(),
        })
    }

    pub fn decision(&self) -> Decision {
        Decision {
            p: self.p.clone(),
            q: self.q.clone(),
            r: self.r.clone(),
            s: self.s.clone(),
            k: self.k.clone(),
            mu: self.mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub status: SdpStatus,
    pub gains: Option<ObserverGains>,
    pub objective: f64,
    pub gap_bound: f64,
    pub newton_steps: usize,
    /// `(constraint, smallest eigenvalue of its ≽ 0 form)`.
    pub constraint_margins: Vec<(String, f64)>,
}

pub fn solve_observer_sdp(problem: &SdpProblem) -> Result<Synthesis> {
    solve_observer_sdp_with(problem, &SdpOptions::default())
}

pub fn solve_observer_sdp_with(problem: &SdpProblem, opts: &SdpOptions) -> Result<Synthesis> {
    problem.validate()?;
    let lmi = problem.to_lmi_problem();
    let sol = solve_lmi(&lmi, &problem.initial_point(), opts);
    let constraint_margins = lmi
        .blocks
        .iter()
        .zip(&sol.block_min_eigenvalues)
        .map(|(b, v)| (b.name.clone(), *v))
        .collect();
    let gains = match sol.status {
        SdpStatus::Optimal => Some(ObserverGains::from_decision(problem, &problem.unpack(&sol.x))?),
        _ => None,
    };
    Ok(Synthesis {
        status: sol.status,
        gains,
        objective: sol.objective,
        gap_bound: sol.gap_bound,
        newton_steps: sol.newton_steps,
        constraint_margins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCheck {
    pub constraint: String,
    /// Max eigenvalue of the block (min eigenvalue for the definiteness checks).
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub checks: Vec<GainCheck>,
    pub passed: bool,
    /// `σ_max(R)² ≤ μ (+ tol)`, implied by the attenuation block.
    pub r_norm_sq: f64,
}

impl Verification {
    pub fn violated(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.constraint.as_str())
            .collect()
    }
}

/// Recomputes the constraint blocks from `(P, Q, R, S, K, μ)` and checks their spectra.
pub fn verify_gains(gains: &ObserverGains, problem: &SdpProblem, tol: f64) -> Verification {
    let d = gains.decision();
    let [b1, b2, b3] = problem.constraint_blocks(&d);
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, limit: f64, upper: bool| {
        let passed = if upper { value <= limit } else { value >= limit };
        checks.push(GainCheck {
            constraint: name.to_string(),
            value,
            limit,
            passed,
        });
    };
    push("dissipation", max_eigenvalue(&b1), -problem.margin + tol, true);
    if problem.lipschitz > 0.0 {
        push("lipschitz", max_eigenvalue(&b2), tol, true);
    } else {
        let kmax = d.k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        push("K = 0", kmax, tol, true);
    }
    push("attenuation", max_eigenvalue(&b3), tol, true);
    push("P ≻ 0", min_eigenvalue(&d.p), tol, false);
    push("Q ≻ 0", min_eigenvalue(&d.q), tol, false);
    let r_norm = crate::linalg::max_singular_value(&d.r);
    let passed = checks.iter().all(|c| c.passed);
    Verification {
        checks,
        passed,
        r_norm_sq: r_norm * r_norm,
    }
}
