//! Explicit Runge–Kutta integration (Dormand–Prince 5(4)).
//!
//! The right-hand side receives `(t, piece, x, dx)`: `piece` is a time strictly
//! inside the current integration segment, so piecewise-defined inputs can be
//! evaluated on the correct side of a discontinuity even at segment endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepControl {
    Adaptive {
        rtol: f64,
        atol: f64,
        /// Step below which integration is declared failed.
        h_min: f64,
        max_steps: usize,
    },
    /// Fixed step; every segment is split into equal steps no longer than `step`.
    Fixed { step: f64 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::adaptive(1e-9, 1e-9)
    }
}

impl StepControl {
    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        StepControl::Adaptive {
            rtol,
            atol,
            h_min: 1e-12,
            max_steps: 5_000_000,
        }
    }

    pub fn fixed(step: f64) -> Self {
        StepControl::Fixed { step }
    }

    /// Same control with tolerances (or step) scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            StepControl::Adaptive {
                rtol,
                atol,
                h_min,
                max_steps,
            } => StepControl::Adaptive {
                rtol: rtol * factor,
                atol: atol * factor,
                h_min,
                max_steps,
            },
            StepControl::Fixed { step } => StepControl::Fixed {
                step: step * factor,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            StepControl::Adaptive { rtol, atol, .. } => {
                if !(rtol >= 0.0 && atol >= 0.0 && rtol + atol > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "tolerances must be nonnegative and not both zero (rtol {rtol}, atol {atol})"
                    )));
                }
            }
            StepControl::Fixed { step } => {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Error::InvalidInput(format!("fixed step {step} must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

// Dormand–Prince coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y5: Vec<f64>,
}

impl Stages {
    fn new(n: usize) -> Self {
        Stages {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y5: vec![0.0; n],
        }
    }
}

/// One Dormand–Prince step from `(t, x)` with `k[0] = f(t, x)` already filled.
/// Leaves the 5th-order solution in `st.y5` and `f(t+h, y5)` in `k[6]`.
fn dp_step<F>(rhs: &mut F, t: f64, piece: f64, x: &[f64], h: f64, st: &mut Stages)
where
    F: FnMut(f64, f64, &[f64], &mut [f64]),
{
    let n = x.len();
    let Stages { k, tmp, y5 } = st;
    macro_rules! stage {
        ($dst:expr, $c:expr, $($a:expr => $ki:expr),+) => {{
            for i in 0..n {
                tmp[i] = x[i] + h * (0.0 $(+ $a * k[$ki][i])+);
            }
            let (_, tail) = k.split_at_mut($dst);
            rhs(t + $c * h, piece, tmp, &mut tail[0]);
        }};
    }
    stage!(1, C2, A21 => 0);
    stage!(2, C3, A31 => 0, A32 => 1);
    stage!(3, C4, A41 => 0, A42 => 1, A43 => 2);
    stage!(4, C5, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
    stage!(5, 1.0, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
    for i in 0..n {
        y5[i] = x[i] + h * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
    }
    let (_, tail) = k.split_at_mut(6);
    rhs(t + h, piece, y5, &mut tail[0]);
}

fn error_norm(st: &Stages, x: &[f64], h: f64, rtol: f64, atol: f64) -> f64 {
    let n = x.len();
    let k = &st.k;
    let mut acc = 0.0;
    for i in 0..n {
        let e = h
            * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                + E7 * k[6][i]);
        let sc = atol + rtol * x[i].abs().max(st.y5[i].abs());
        acc += (e / sc) * (e / sc);
    }
    (acc / n.max(1) as f64).sqrt()
}

/// Integrates from `t_out[0]` and returns the state at every entry of `t_out`
/// (strictly increasing). Steps never cross an output time or a breakpoint.
pub fn solve<F>(
    mut rhs: F,
    x0: &[f64],
    t_out: &[f64],
    breakpoints: &[f64],
    control: &StepControl,
) -> Result<(Vec<Vec<f64>>, SolveStats)>
where
    F: FnMut(f64, f64, &[f64], &mut [f64]),
{
    control.validate()?;
    if t_out.is_empty() {
        return Ok((Vec::new(), SolveStats::default()));
    }
    if t_out.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("output times must be strictly increasing".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            last_time: t_out[0],
            reason: "non-finite initial state".into(),
        });
    }
    let t0 = t_out[0];
    let t_end = *t_out.last().unwrap();
    let mut nodes: Vec<(f64, bool)> = t_out.iter().map(|&t| (t, true)).collect();
    for &b in breakpoints {
        if b > t0 && b < t_end && !t_out.iter().any(|&t| (t - b).abs() <= 1e-12 * (1.0 + b.abs())) {
            nodes.push((b, false));
        }
    }
    nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let n = x0.len();
    let mut st = Stages::new(n);
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(t_out.len());
    out.push(x.clone());
    let mut stats = SolveStats::default();
    let mut h_prev: Option<f64> = None;

    for w in nodes.windows(2) {
        let (a, b) = (w[0].0, w[1].0);
        let piece = 0.5 * (a + b);
        match *control {
            StepControl::Fixed { step } => {
                let m = ((b - a) / step).ceil().max(1.0) as usize;
                let h = (b - a) / m as f64;
                let mut t = a;
                rhs(t, piece, &x, &mut st.k[0]);
                stats.rhs_evals += 1;
                for s in 0..m {
                    if s > 0 {
                        // First-same-as-last: f at the new point is already in k[6].
                        st.k.swap(0, 6);
                    }
                    dp_step(&mut rhs, t, piece, &x, h, &mut st);
                    stats.rhs_evals += 6;
                    stats.accepted += 1;
                    x.copy_from_slice(&st.y5);
                    t = if s + 1 == m { b } else { a + (s + 1) as f64 * h };
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Integration {
                            last_time: t - h,
                            reason: "non-finite state".into(),
                        });
                    }
                }
            }
            StepControl::Adaptive {
                rtol,
                atol,
                h_min,
                max_steps,
            } => {
                let mut t = a;
                rhs(t, piece, &x, &mut st.k[0]);
                stats.rhs_evals += 1;
                let mut h = match h_prev {
                    Some(hp) => hp,
                    None => initial_step(&x, &st.k[0], rtol, atol),
                }
                .min(b - a);
                while t < b {
                    if stats.accepted + stats.rejected >= max_steps {
                        return Err(Error::Integration {
                            last_time: t,
                            reason: "maximum number of steps exceeded".into(),
                        });
                    }
                    let mut last = false;
                    if t + h >= b || (b - (t + h)) < 1e-10 * h {
                        h = b - t;
                        last = true;
                    }
                    dp_step(&mut rhs, t, piece, &x, h, &mut st);
                    stats.rhs_evals += 6;
                    let err = error_norm(&st, &x, h, rtol, atol);
                    if err.is_finite() && err <= 1.0 {
                        t = if last { b } else { t + h };
                        x.copy_from_slice(&st.y5);
                        let (k0, rest) = st.k.split_at_mut(1);
                        k0[0].copy_from_slice(&rest[5]);
                        stats.accepted += 1;
                        let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                        if !last {
                            h *= fac;
                        } else {
                            h_prev = Some((h * fac).max(h));
                        }
                    } else {
                        stats.rejected += 1;
                        let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
                        h *= fac;
                        if h < h_min {
                            return Err(Error::Integration {
                                last_time: t,
                                reason: format!("step size underflow (h = {h:.3e})"),
                            });
                        }
                    }
                }
            }
        }
        if w[1].1 {
            out.push(x.clone());
        }
    }
    Ok((out, stats))
}

fn initial_step(x: &[f64], f0: &[f64], rtol: f64, atol: f64) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..x.len() {
        let sc = atol + rtol * x[i].abs();
        d0 += (x[i] / sc).powi(2);
        d1 += (f0[i] / sc).powi(2);
    }
    let n = x.len().max(1) as f64;
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.clamp(1e-8, 1.0)
}
