//! Forward simulation, synthetic data and record interpolation.

pub mod forecast;
pub mod ode;
pub mod signal;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{StructuredModel, STATE_NAMES};
pub use forecast::{forecast_polyfit, PolyFit};
pub use ode::{SolveStats, StepControl};
pub use signal::{
    nominal_input, ConstantInput, InputSignal, NominalInput, PiecewiseConstant, PiecewiseLinear,
};

/// Time-stamped states, outputs and inputs of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Largest value of state `index` along the trajectory, with its time.
    pub fn state_max(&self, index: usize) -> (f64, f64) {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(t, x)| (x[index], *t))
            .fold((f64::NEG_INFINITY, f64::NAN), |a, b| if b.0 > a.0 { b } else { a })
    }

    /// `t,S,I,D,H,E,R[,y1..]` (generic `x1..` names for other state sizes).
    pub fn to_csv(&self, with_outputs: bool) -> String {
        let n_x = self.states.first().map_or(0, |s| s.len());
        let n_y = self.outputs.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string()];
        header.extend(state_names(n_x));
        if with_outputs {
            header.extend((1..=n_y).map(|i| format!("y{i}")));
        }
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.states[k]);
            if with_outputs {
                row.extend(&self.outputs[k]);
            }
            out.push_str(&csv_row(&row));
        }
        out
    }
}

impl Trajectory {
    /// Reads the layout written by [`Trajectory::to_csv`]; inputs are left empty.
    pub fn from_csv(text: &str, source: &str) -> Result<Trajectory> {
        let (header, rows) = parse_table(text, source)?;
        let bad = |reason: String| Error::Csv {
            path: source.to_string(),
            reason,
        };
        if header.first().map(String::as_str) != Some("t") {
            return Err(bad("first column must be `t`".into()));
        }
        let n_y = header.iter().filter(|h| h.starts_with('y')).count();
        let n_x = header.len() - 1 - n_y;
        if header[1..1 + n_x] != state_names(n_x)[..] {
            return Err(bad(format!("unrecognized state columns in header {header:?}")));
        }
        let mut traj = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            outputs: Vec::new(),
            inputs: Vec::new(),
        };
        for r in rows {
            traj.times.push(r[0]);
            traj.states.push(r[1..1 + n_x].to_vec());
            traj.outputs.push(r[1 + n_x..].to_vec());
            traj.inputs.push(Vec::new());
        }
        if traj.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(bad("times must be strictly increasing".into()));
        }
        Ok(traj)
    }
}

/// Header and numeric rows of a comma-separated table; every row must match
/// the header width.
pub fn parse_table(text: &str, source: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |reason: String| Error::Csv {
        path: source.to_string(),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("missing header".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| bad(format!("row {}: {e}", lineno + 2)))?;
        if vals.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                vals.len(),
                header.len()
            )));
        }
        rows.push(vals);
    }
    Ok((header, rows))
}

pub fn state_names(n_x: usize) -> Vec<String> {
    if n_x == STATE_NAMES.len() {
        STATE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=n_x).map(|i| format!("x{i}")).collect()
    }
}

/// Full-precision (17 significant digit) comma-separated row with LF ending.
pub fn csv_row(values: &[f64]) -> String {
    let mut s = values
        .iter()
        .map(|v| format_f64(*v))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    s
}

pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-channel standard deviation; a scalar applies to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelStd {
    Uniform(f64),
    PerChannel(Vec<f64>),
}

impl ChannelStd {
    pub fn get(&self, channel: usize) -> f64 {
        match self {
            ChannelStd::Uniform(s) => *s,
            ChannelStd::PerChannel(v) => v.get(channel).cloned().unwrap_or(0.0),
        }
    }

    fn validate(&self, n: usize, what: &str) -> Result<()> {
        let ok = match self {
            ChannelStd::Uniform(s) => *s >= 0.0 && s.is_finite(),
            ChannelStd::PerChannel(v) => {
                if v.len() != n {
                    return Err(Error::dims(format!("{what} noise channels"), n, v.len()));
                }
                v.iter().all(|s| *s >= 0.0 && s.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{what} noise std must be finite and ≥ 0")))
        }
    }
}

/// Zero-mean Gaussian corruption of the recorded inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub input_noise_std: ChannelStd,
    pub output_noise_std: ChannelStd,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::uniform(0.0, 0.0, 0)
    }

    pub fn uniform(input_std: f64, output_std: f64, seed: u64) -> Self {
        NoiseSpec {
            input_noise_std: ChannelStd::Uniform(input_std),
            output_noise_std: ChannelStd::Uniform(output_std),
            seed,
        }
    }
}

/// Sampled noisy input–output records `(ū, ȳ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub times: Vec<f64>,
    pub u_bar: Vec<Vec<f64>>,
    pub y_bar: Vec<Vec<f64>>,
    pub noise: Option<NoiseSpec>,
}

impl DataSet {
    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::InvalidInput("empty data set".into()));
        }
        if self.u_bar.len() != self.times.len() {
            return Err(Error::dims("input records", self.times.len(), self.u_bar.len()));
        }
        if self.y_bar.len() != self.times.len() {
            return Err(Error::dims("output records", self.times.len(), self.y_bar.len()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("sample times must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_u(&self) -> usize {
        self.u_bar.first().map_or(0, |v| v.len())
    }

    pub fn n_y(&self) -> usize {
        self.y_bar.first().map_or(0, |v| v.len())
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Piecewise-linear interpolation of `(ū, ȳ)` at `t`.
    pub fn interpolate(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (start, end) = (self.start(), self.end());
        if !(t >= start && t <= end) {
            return Err(Error::OutOfRange { t, start, end });
        }
        let mut u = vec![0.0; self.n_u()];
        let mut y = vec![0.0; self.n_y()];
        let us = self.input_signal();
        let k = us.interval(t);
        us.eval_in_interval(k, t, &mut u);
        self.output_signal().eval_in_interval(k, t, &mut y);
        Ok((u, y))
    }

    /// ū as a continuous-time signal.
    pub fn input_signal(&self) -> PiecewiseLinear {
        PiecewiseLinear {
            times: self.times.clone(),
            values: self.u_bar.clone(),
        }
    }

    /// ȳ as a continuous-time signal.
    pub fn output_signal(&self) -> PiecewiseLinear {
        PiecewiseLinear {
            times: self.times.clone(),
            values: self.y_bar.clone(),
        }
    }

    /// Copy restricted to the samples with `t ≤ t_max`.
    pub fn truncated(&self, t_max: f64) -> DataSet {
        let n = self.times.partition_point(|&t| t <= t_max + 1e-12);
        DataSet {
            times: self.times[..n].to_vec(),
            u_bar: self.u_bar[..n].to_vec(),
            y_bar: self.y_bar[..n].to_vec(),
            noise: self.noise.clone(),
        }
    }

    /// Header `t,u1..,y1..`; values in full double precision.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_u()).map(|i| format!("u{i}")));
        header.extend((1..=self.n_y()).map(|i| format!("y{i}")));
        let mut out = header.join(",");
        out.push('\n');
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k]];
            row.extend(&self.u_bar[k]);
            row.extend(&self.y_bar[k]);
            out.push_str(&csv_row(&row));
        }
        out
    }

    pub fn from_csv(text: &str, source: &str) -> Result<DataSet> {
        let (header, rows) = parse_table(text, source)?;
        let bad = |reason: String| Error::Csv {
            path: source.to_string(),
            reason,
        };
        if header.first().map(String::as_str) != Some("t") {
            return Err(bad("first column must be `t`".into()));
        }
        let n_u = header.iter().filter(|h| h.starts_with('u')).count();
        let n_y = header.iter().filter(|h| h.starts_with('y')).count();
        if 1 + n_u + n_y != header.len() {
            return Err(bad(format!("unrecognized columns in header {header:?}")));
        }
        for (i, h) in header[1..1 + n_u].iter().enumerate() {
            if *h != format!("u{}", i + 1) {
                return Err(bad(format!("expected column u{} but found {h}", i + 1)));
            }
        }
        for (i, h) in header[1 + n_u..].iter().enumerate() {
            if *h != format!("y{}", i + 1) {
                return Err(bad(format!("expected column y{} but found {h}", i + 1)));
            }
        }
        let data = DataSet {
            times: rows.iter().map(|r| r[0]).collect(),
            u_bar: rows.iter().map(|r| r[1..1 + n_u].to_vec()).collect(),
            y_bar: rows.iter().map(|r| r[1 + n_u..].to_vec()).collect(),
            noise: None,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn read_csv(path: &Path) -> Result<DataSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// `ta, ta+dt, …, tb`; `tb` is appended when `dt` does not divide the span.
pub fn uniform_grid(ta: f64, tb: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !(tb > ta) {
        return Err(Error::InvalidInput(format!(
            "invalid grid [{ta}, {tb}] with step {dt}"
        )));
    }
    let n = ((tb - ta) / dt).round() as usize;
    let mut t: Vec<f64> = (0..=n).map(|k| ta + k as f64 * dt).collect();
    if (t[n] - tb).abs() <= 1e-9 * dt {
        t[n] = tb;
    } else if t[n] < tb {
        t.push(tb);
    } else {
        t[n] = tb;
    }
    Ok(t)
}

/// Integrates `ẋ = A x + G f(Hx, u(t))` and records the trajectory at `times`.
pub fn integrate(
    model: &StructuredModel,
    x0: &[f64],
    input: &dyn InputSignal,
    times: &[f64],
    control: &StepControl,
) -> Result<Trajectory> {
    let d = model.dims();
    if x0.len() != d.n_x {
        return Err(Error::dims("initial state", d.n_x, x0.len()));
    }
    if input.dim() != d.n_u {
        return Err(Error::dims("input signal", d.n_u, input.dim()));
    }
    if times.len() < 2 {
        return Err(Error::InvalidInput("integration needs tb > ta".into()));
    }
    let (ta, tb) = (times[0], *times.last().unwrap());
    let bps = input.breakpoints(ta, tb);
    let mut ws = model.scratch();
    let mut u = vec![0.0; d.n_u];
    let (states, _) = ode::solve(
        |t, piece, x, dx| {
            input.eval_piece(t, piece, &mut u);
            model.rhs_into(x, &u, dx, &mut ws);
        },
        x0,
        times,
        &bps,
        control,
    )?;
    let outputs = states
        .iter()
        .map(|x| {
            let mut y = vec![0.0; d.n_y];
            model.output_into(x, &mut y);
            y
        })
        .collect();
    let inputs = times.iter().map(|&t| input.value(t)).collect();
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        outputs,
        inputs,
    })
}

/// Simulates with the noise-free input and records `ū = u + δ_u`, `ȳ = y + δ_y`
/// on the sampling grid. Returns the data set and the noise-free trajectory.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    model: &StructuredModel,
    x0: &[f64],
    input: &dyn InputSignal,
    t0: f64,
    t1: f64,
    sample_dt: f64,
    noise: &NoiseSpec,
    control: &StepControl,
) -> Result<(DataSet, Trajectory)> {
    let d = model.dims();
    noise.input_noise_std.validate(d.n_u, "input")?;
    noise.output_noise_std.validate(d.n_y, "output")?;
    let times = uniform_grid(t0, t1, sample_dt)?;
    let truth = integrate(model, x0, input, &times, control)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut u_bar = Vec::with_capacity(times.len());
    let mut y_bar = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let uk: Vec<f64> = (0..d.n_u)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                truth.inputs[k][i] + noise.input_noise_std.get(i) * z
            })
            .collect();
        let yk: Vec<f64> = (0..d.n_y)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                truth.outputs[k][i] + noise.output_noise_std.get(i) * z
            })
            .collect();
        u_bar.push(uk);
        y_bar.push(yk);
    }
    Ok((
        DataSet {
            times,
            u_bar,
            y_bar,
            noise: Some(noise.clone()),
        },
        truth,
    ))
}
