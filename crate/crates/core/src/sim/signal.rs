//! Input signals `t ↦ u(t)` with known discontinuities.

use std::f64::consts::PI;

/// A time-varying input. `piece` is any time strictly inside the smooth piece
/// that should be used; at a jump the value depends on which side `piece` lies.
pub trait InputSignal: Send + Sync {
    fn dim(&self) -> usize;
    fn eval_piece(&self, t: f64, piece: f64, out: &mut [f64]);
    /// Times in the open interval `(ta, tb)` where the signal is not smooth.
    fn breakpoints(&self, ta: f64, tb: f64) -> Vec<f64>;

    fn eval(&self, t: f64, out: &mut [f64]) {
        self.eval_piece(t, t, out)
    }

    fn value(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.eval(t, &mut v);
        v
    }
}

/// Nearest integer, ties away from zero.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Nominal input of the synthetic experiment:
/// `u = 0.01·round(sin(t/2), cos(t/2), sin(t/3), cos(t/3)) + 0.015`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalInput;

pub fn nominal_input(t: f64) -> [f64; 4] {
    [
        0.01 * round_half_away((t / 2.0).sin()) + 0.015,
        0.01 * round_half_away((t / 2.0).cos()) + 0.015,
        0.01 * round_half_away((t / 3.0).sin()) + 0.015,
        0.01 * round_half_away((t / 3.0).cos()) + 0.015,
    ]
}

impl InputSignal for NominalInput {
    fn dim(&self) -> usize {
        4
    }

    fn eval_piece(&self, _t: f64, piece: f64, out: &mut [f64]) {
        // Piecewise constant: the value is that of the piece.
        out.copy_from_slice(&nominal_input(piece));
    }

    fn breakpoints(&self, ta: f64, tb: f64) -> Vec<f64> {
        // Rounded sin/cos change value where they cross ±1/2.
        let mut out = Vec::new();
        for scale in [2.0, 3.0] {
            for base in [PI / 6.0, PI / 3.0, 2.0 * PI / 3.0, 5.0 * PI / 6.0] {
                let mut k = ((ta / scale - base) / PI).floor() as i64;
                loop {
                    let t = scale * (base + k as f64 * PI);
                    if t >= tb {
                        break;
                    }
                    if t > ta {
                        out.push(t);
                    }
                    k += 1;
                }
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantInput(pub Vec<f64>);

impl InputSignal for ConstantInput {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn eval_piece(&self, _t: f64, _piece: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
    fn breakpoints(&self, _ta: f64, _tb: f64) -> Vec<f64> {
        Vec::new()
    }
}

/// Piecewise-constant schedule: `values[k]` holds on `[starts[k], starts[k+1])`,
/// the last value extends to infinity and the first one backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    pub starts: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PiecewiseConstant {
    fn index(&self, t: f64) -> usize {
        match self.starts.partition_point(|&s| s <= t) {
            0 => 0,
            k => k - 1,
        }
    }
}

impl InputSignal for PiecewiseConstant {
    fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }
    fn eval_piece(&self, _t: f64, piece: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.values[self.index(piece)]);
    }
    fn breakpoints(&self, ta: f64, tb: f64) -> Vec<f64> {
        self.starts.iter().cloned().filter(|&s| s > ta && s < tb).collect()
    }
}

/// Linear interpolation through `(times[k], values[k])`, held constant outside.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PiecewiseLinear {
    /// Interval index `k` with `times[k] ≤ t ≤ times[k+1]`, clamped.
    pub fn interval(&self, t: f64) -> usize {
        let n = self.times.len();
        if n < 2 {
            return 0;
        }
        self.times.partition_point(|&s| s <= t).clamp(1, n - 1) - 1
    }

    pub fn eval_in_interval(&self, k: usize, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        if n == 1 {
            out.copy_from_slice(&self.values[0]);
            return;
        }
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let tc = t.clamp(self.times[0], self.times[n - 1]);
        let w = (tc - t0) / (t1 - t0);
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.values[k][i] + w * (self.values[k + 1][i] - self.values[k][i]);
        }
    }
}

impl InputSignal for PiecewiseLinear {
    fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }
    fn eval_piece(&self, t: f64, piece: f64, out: &mut [f64]) {
        let k = self.interval(piece);
        self.eval_in_interval(k, t, out);
    }
    fn breakpoints(&self, ta: f64, tb: f64) -> Vec<f64> {
        self.times.iter().cloned().filter(|&s| s > ta && s < tb).collect()
    }
}
