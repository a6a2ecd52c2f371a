//! Configuration, artifact manifest and the stages behind the command line:
//! generate → identify → estimate → design-observer → observe → control, then report.
//!
//! Every stage reads its inputs from files recorded in the manifest (checked
//! against their hashes) and writes its outputs next to it.

mod manifest;
mod report;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimation::{ClosedFormVariant, EstimationConfig};
use crate::linalg::DenseMatrix;
use crate::model::{build_sidher, sidher_input_bounds, Domain, ParameterVector};
use crate::ocp::{OcpOptions, OcpSpec, PathLimit};

pub use manifest::{sha256_hex, Artifact, RunManifest, StageRecord, StageStatus, Workspace, MANIFEST_FILE};
pub use report::{cmd_report, Report};
pub use stages::{BaselineReport, ControlSummary, EstimateRecord, ObserverSummary, SynthesisRecord, ESTIMATION_FILE};

pub const CONFIG_FILE: &str = "config.json";
pub const OUTPUT_DIR_ENV: &str = "EPICTRL_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Identify,
    Estimate,
    DesignObserver,
    Observe,
    Control,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Identify,
        Stage::Estimate,
        Stage::DesignObserver,
        Stage::Observe,
        Stage::Control,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Identify => "identify",
            Stage::Estimate => "estimate",
            Stage::DesignObserver => "design-observer",
            Stage::Observe => "observe",
            Stage::Control => "control",
        }
    }

    /// Process exit code when this stage fails.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Generate => 2,
            Stage::Identify => 3,
            Stage::Estimate => 4,
            Stage::DesignObserver => 5,
            Stage::Observe => 6,
            Stage::Control => 7,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    /// `None` for validation, I/O and integrity failures.
    pub stage: Option<Stage>,
    pub message: String,
}

impl PipelineError {
    pub fn validation(message: impl Into<String>) -> Self {
        PipelineError {
            stage: None,
            message: message.into(),
        }
    }

    pub fn stage(stage: Stage, message: impl Into<String>) -> Self {
        PipelineError {
            stage: Some(stage),
            message: message.into(),
        }
    }

    /// 2 for validation and I/O, otherwise the failing stage's code.
    pub fn exit_code(&self) -> i32 {
        self.stage.map_or(2, Stage::exit_code)
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "{s} failed: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for PipelineError {}

/// Library errors inside a stage: I/O and malformed files are validation
/// failures, the rest belong to the stage.
fn in_stage(stage: Stage) -> impl Fn(Error) -> PipelineError {
    move |e| match e {
        Error::Io { .. } | Error::Csv { .. } | Error::Json(_) => PipelineError::validation(e.to_string()),
        other => PipelineError::stage(stage, other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Parameters of the synthetic truth.
    pub theta: ParameterVector,
    /// True state at `data.t0`.
    pub x0: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            theta: ParameterVector::reference_truth(),
            x0: vec![0.999, 0.0005, 0.0005, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub t0: f64,
    pub t1: f64,
    pub sample_dt: f64,
    pub input_noise_std: f64,
    pub output_noise_std: f64,
    /// Recorded data CSV; when set no synthetic truth exists.
    pub file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            t0: 0.0,
            t1: 30.0,
            sample_dt: 0.1,
            input_noise_std: 1e-3,
            output_noise_std: 1e-3,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Spacing of the output samples stacked into the Jacobian (days).
    pub sample_dt: f64,
    pub fd_step: f64,
    pub tol: f64,
    /// Random interior points of the simplex to test.
    pub points: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            sample_dt: 1.0,
            fd_step: 1e-5,
            tol: 1e-8,
            points: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    /// Fix ρ, φ, σ, ξ at their closed-form values before fitting the rest.
    pub closed_form_rates: bool,
    pub closed_form_variant: ClosedFormVariant,
    /// The seed is replaced by the run seed.
    pub fit: EstimationConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            closed_form_rates: true,
            closed_form_variant: ClosedFormVariant::default(),
            fit: EstimationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzDomain {
    Simplex,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    pub margin: f64,
    pub lipschitz_domain: LipschitzDomain,
    pub lipschitz_grid: usize,
    /// Replaces the computed Lipschitz constant.
    pub lipschitz: Option<f64>,
    /// Replaces Ĉ of the estimated model.
    pub output_matrix: Option<DenseMatrix>,
    pub verify_tol: f64,
    /// x̂(t₀); defaults to the initial-state guess from the data.
    pub initial_state: Option<Vec<f64>>,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            margin: 1e-6,
            lipschitz_domain: LipschitzDomain::Simplex,
            lipschitz_grid: 21,
            lipschitz: None,
            output_matrix: None,
            verify_tol: 1e-7,
            initial_state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub period_length: f64,
    pub n_periods: usize,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub input_bounds: Vec<(f64, f64)>,
    pub path_limits: Vec<PathLimit>,
    pub constraint_grid_dt: f64,
    /// Fixed integration step of the shooting map (days).
    pub step: f64,
    pub options: OcpOptions,
    /// Constant policy the optimum is compared against.
    pub baseline: Vec<f64>,
}

impl Default for OcpConfig {
    fn default() -> Self {
        let m = build_sidher(&ParameterVector::reference_estimate()).expect("reference model");
        let s = OcpSpec::sidher(m, vec![0.0; 6], 0.0);
        OcpConfig {
            period_length: s.period_length,
            n_periods: s.n_periods,
            gamma: s.gamma,
            lambda: s.lambda,
            input_bounds: sidher_input_bounds(),
            path_limits: s.path_limits,
            constraint_grid_dt: s.constraint_grid_dt,
            step: 0.05,
            options: OcpOptions::default(),
            baseline: vec![0.5, 0.9, 0.4, 0.35],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Index of the forecast state (E by default).
    pub state: usize,
    pub degree: usize,
    /// Spacing of the forecast grid (days).
    pub dt: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            state: 4,
            degree: 2,
            dt: 0.5,
        }
    }
}

/// One JSON document; every default reproduces the synthetic SIDHER experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub identify: IdentifyConfig,
    pub estimate: EstimateConfig,
    pub observer: ObserverConfig,
    pub ocp: OcpConfig,
    pub forecast: ForecastConfig,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

fn invalid(field: &str, reason: impl fmt::Display) -> PipelineError {
    PipelineError::validation(format!("invalid config `{field}`: {reason}"))
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::validation(format!("malformed config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Synthetic mode: data is generated from `model`, so the truth is known.
    pub fn synthetic(&self) -> bool {
        self.data.file.is_none()
    }

    /// The OCP starts where the data ends.
    pub fn ocp_spec(&self, theta_hat: &ParameterVector, x_init: Vec<f64>) -> crate::Result<OcpSpec> {
        let m = build_sidher(theta_hat)?;
        let mut s = OcpSpec::sidher(m, x_init, self.data.t1);
        s.period_length = self.ocp.period_length;
        s.n_periods = self.ocp.n_periods;
        s.gamma = self.ocp.gamma.clone();
        s.lambda = self.ocp.lambda.clone();
        s.input_bounds = self.ocp.input_bounds.clone();
        s.path_limits = self.ocp.path_limits.clone();
        s.constraint_grid_dt = self.ocp.constraint_grid_dt;
        s.control = crate::sim::StepControl::fixed(self.ocp.step);
        s.validate()?;
        Ok(s)
    }

    pub fn lipschitz_domain(&self) -> Domain {
        match self.observer.lipschitz_domain {
            LipschitzDomain::Simplex => Domain::sidher_simplex(),
            LipschitzDomain::Box => Domain::sidher_box(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.data;
        if !(d.t0.is_finite() && d.t1.is_finite() && d.t1 > d.t0) {
            return Err(invalid("data", format!("empty data span [{}, {}]", d.t0, d.t1)));
        }
        if !(d.sample_dt > 0.0 && d.sample_dt <= d.t1 - d.t0) {
            return Err(invalid("data.sample_dt", "must lie in (0, t1 − t0]"));
        }
        if !(d.input_noise_std >= 0.0 && d.output_noise_std >= 0.0) {
            return Err(invalid("data", "noise standard deviations must be nonnegative"));
        }
        if let Some(f) = &d.file {
            if !f.exists() {
                return Err(invalid("data.file", format!("{} does not exist", f.display())));
            }
        }
        self.model
            .theta
            .validate()
            .map_err(|e| invalid("model.theta", e))?;
        let x0 = &self.model.x0;
        if x0.len() != 6 || x0.iter().any(|v| !(*v >= 0.0)) || (x0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("model.x0", "must be six nonnegative fractions summing to one"));
        }
        let i = &self.identify;
        if !(i.sample_dt > 0.0 && i.fd_step > 0.0 && i.tol > 0.0) || i.points == 0 {
            return Err(invalid("identify", "sample_dt, fd_step, tol and points must be positive"));
        }
        self.estimate.fit.validate().map_err(|e| invalid("estimate.fit", e))?;
        let o = &self.observer;
        if !(o.margin > 0.0) {
            return Err(invalid("observer.margin", "must be positive"));
        }
        if o.lipschitz_grid < 2 {
            return Err(invalid("observer.lipschitz_grid", "must be at least 2"));
        }
        if let Some(l) = o.lipschitz {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(invalid("observer.lipschitz", "must be finite and nonnegative"));
            }
        }
        if let Some(c) = &o.output_matrix {
            let m = c.to_matrix().map_err(|e| invalid("observer.output_matrix", e))?;
            if m.ncols() != 6 {
                return Err(invalid("observer.output_matrix", "must have 6 columns"));
            }
        }
        if let Some(x) = &o.initial_state {
            if x.len() != 6 {
                return Err(invalid("observer.initial_state", "must have 6 entries"));
            }
        }
        if !(o.verify_tol > 0.0) {
            return Err(invalid("observer.verify_tol", "must be positive"));
        }
        if !(self.ocp.step > 0.0) {
            return Err(invalid("ocp.step", "must be positive"));
        }
        if self.ocp.baseline.len() != self.ocp.input_bounds.len() {
            return Err(invalid("ocp.baseline", "needs one value per input"));
        }
        self.ocp_spec(&ParameterVector::reference_estimate(), vec![0.0; 6])
            .map_err(|e| invalid("ocp", e))?;
        if self.forecast.state >= 6 || !(self.forecast.dt > 0.0) {
            return Err(invalid("forecast", "state must be below 6 and dt positive"));
        }
        Ok(())
    }
}

/// Resolves the output directory: explicit flag, then config, then the
/// `EPICTRL_OUTPUT_DIR` environment variable.
pub fn resolve_output_dir(flag: Option<&Path>, config: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = &config.output_dir {
        return Ok(p.clone());
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(PipelineError::validation(format!(
            "no output directory: pass --output, set `output_dir` in the config or {OUTPUT_DIR_ENV}"
        ))),
    }
}

/// A validated configuration bound to an output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub workspace: Workspace,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, dir: &Path, verbose: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut workspace = Workspace::open(dir)?;
        let art = workspace.write_raw(CONFIG_FILE, config.to_json().as_bytes())?;
        if workspace.manifest.config.as_ref() != Some(&art) {
            // A different configuration invalidates every earlier stage.
            workspace.manifest.stages.clear();
        }
        workspace.manifest.config = Some(art);
        workspace.save()?;
        Ok(Pipeline {
            config,
            workspace,
            verbose,
        })
    }

    /// Runs one stage; earlier stages must have completed.
    pub fn run_stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let missing = self.workspace.manifest.missing_before(stage);
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|s| s.name()).collect();
            return Err(PipelineError::validation(format!(
                "`{stage}` needs completed stages: {}",
                names.join(", ")
            )));
        }
        let start = Instant::now();
        let mut io = stages::StageIo::default();
        let result = stages::run(stage, &self.config, &self.workspace, &mut io);
        let seconds = start.elapsed().as_secs_f64();
        let status = match &result {
            Ok(()) => StageStatus::Completed,
            Err(e) => StageStatus::Failed {
                exit_code: e.exit_code(),
                message: e.message.clone(),
            },
        };
        self.workspace.manifest.replace(StageRecord {
            stage,
            status,
            inputs: io.inputs,
            outputs: io.outputs,
            seconds,
        });
        self.workspace.save()?;
        if self.verbose {
            match &result {
                Ok(()) => eprintln!("[{stage}] completed in {seconds:.2} s"),
                Err(e) => eprintln!("[{stage}] {e}"),
            }
        }
        result
    }

    /// All stages in order, stopping at the first failure.
    pub fn run_all(&mut self) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert!(c.validate().is_ok());
        assert_eq!(c.ocp.gamma, vec![0.01, 1.0, 0.0, 2.0, 10.0, 0.0]);
        assert_eq!(c.data.t1, 30.0);
    }

    #[test]
    fn config_round_trip() {
        let mut c = PipelineConfig {
            seed: 17,
            ..Default::default()
        };
        c.observer.lipschitz = Some(1.5);
        c.data.output_noise_std = 0.0;
        let back = PipelineConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"sede": 3}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"data": {"t2": 3}}"#).is_err());
    }

    #[test]
    fn zero_length_span_is_a_validation_error() {
        let mut c = PipelineConfig::default();
        c.data.t1 = c.data.t0;
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn exit_codes_are_unique_per_stage() {
        let codes: Vec<i32> = Stage::ALL[1..].iter().map(|s| s.exit_code()).collect();
        assert_eq!(codes, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn output_dir_precedence() {
        let c = PipelineConfig {
            output_dir: Some("from-config".into()),
            ..Default::default()
        };
        let flag = Path::new("from-flag");
        assert_eq!(resolve_output_dir(Some(flag), &c).unwrap(), flag);
        assert_eq!(resolve_output_dir(None, &c).unwrap(), Path::new("from-config"));
    }
}
