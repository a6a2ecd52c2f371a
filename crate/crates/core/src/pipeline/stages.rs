//! The six pipeline stages. Each reads manifest-listed artifacts and writes
//! its own into the output directory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{in_stage, Artifact, PipelineConfig, PipelineError, Stage, Workspace, CONFIG_FILE};
use crate::estimation::{closed_form_rates_with, fit_parameters, guess_initial_state, ClosedFormRates, EstimationResult};
use crate::identifiability::{local_rank_test, RankReport, RankTestOptions, Verdict};
use crate::model::{build_sidher, estimate_lipschitz, ParameterVector, SidherFamily, StructuredModel};
use crate::observer::{assemble_sdp, run_observer, solve_observer_sdp, verify_gains, ObserverGains, Verification};
use crate::ocp::{shoot, solve_ocp, ConstraintReport, ControlPolicy, OcpStatus, SolverInfo};
use crate::sdp::SdpStatus;
use crate::sim::{
    csv_row, forecast_polyfit, generate_dataset, parse_table, state_names, uniform_grid, DataSet, InputSignal,
    NoiseSpec, NominalInput, StepControl, Trajectory,
};

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const IDENTIFIABILITY_FILE: &str = "identifiability.json";
pub const PATTERN_FILE: &str = "identifiability_pattern.csv";
pub const ESTIMATION_FILE: &str = "estimation.json";
pub const PARAMETERS_FILE: &str = "parameters.csv";
pub const OBSERVER_MODEL_FILE: &str = "observer_model.json";
pub const SYNTHESIS_FILE: &str = "observer_synthesis.json";
pub const GAINS_FILE: &str = "observer_gains.json";
pub const STATE_ESTIMATE_FILE: &str = "state_estimate.csv";
pub const OUTPUT_TRACKING_FILE: &str = "output_tracking.csv";
pub const OBSERVER_SUMMARY_FILE: &str = "observer_summary.json";
pub const OCP_FILE: &str = "ocp_solution.json";
pub const POLICY_FILE: &str = "policy.csv";
pub const PREDICTED_FILE: &str = "predicted.csv";
pub const FORECAST_FILE: &str = "e_forecast.csv";

/// Artifacts touched by one stage run.
#[derive(Default)]
pub struct StageIo {
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

struct Ctx<'a> {
    stage: Stage,
    cfg: &'a PipelineConfig,
    ws: &'a Workspace,
    io: &'a mut StageIo,
}

impl Ctx<'_> {
    fn read(&mut self, from: Stage, name: &str) -> Result<String, PipelineError> {
        let art = self.ws.output_of(from, name)?;
        let text = self.ws.read_verified(&art)?;
        self.io.inputs.push(art);
        Ok(text)
    }

    fn read_json<T: DeserializeOwned>(&mut self, from: Stage, name: &str) -> Result<T, PipelineError> {
        let text = self.read(from, name)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::validation(format!("malformed {name}: {e}")))
    }

    fn read_data(&mut self) -> Result<DataSet, PipelineError> {
        let text = self.read(Stage::Generate, DATA_FILE)?;
        DataSet::from_csv(&text, DATA_FILE).map_err(in_stage(self.stage))
    }

    fn read_truth(&mut self) -> Result<Option<Trajectory>, PipelineError> {
        if !self.cfg.synthetic() {
            return Ok(None);
        }
        let text = self.read(Stage::Generate, TRUTH_FILE)?;
        Trajectory::from_csv(&text, TRUTH_FILE).map(Some).map_err(in_stage(self.stage))
    }

    fn read_theta_hat(&mut self) -> Result<ParameterVector, PipelineError> {
        let rec: EstimateRecord = self.read_json(Stage::Estimate, ESTIMATION_FILE)?;
        Ok(rec.result.theta_hat)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), PipelineError> {
        let art = self.ws.write_raw(name, text.as_bytes())?;
        self.io.outputs.push(art);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write(name, &text)
    }

    fn fail(&self, message: impl Into<String>) -> PipelineError {
        PipelineError::stage(self.stage, message)
    }
}

pub(super) fn run(stage: Stage, cfg: &PipelineConfig, ws: &Workspace, io: &mut StageIo) -> Result<(), PipelineError> {
    let mut ctx = Ctx { stage, cfg, ws, io };
    if let Some(art) = &ws.manifest.config {
        debug_assert_eq!(art.path, CONFIG_FILE);
        ws.read_verified(art)?;
        ctx.io.inputs.push(art.clone());
    }
    match stage {
        Stage::Generate => generate(&mut ctx),
        Stage::Identify => identify(&mut ctx),
        Stage::Estimate => estimate(&mut ctx),
        Stage::DesignObserver => design_observer(&mut ctx),
        Stage::Observe => observe(&mut ctx),
        Stage::Control => control(&mut ctx),
    }
}

fn generate(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let err = in_stage(ctx.stage);
    if let Some(file) = &cfg.data.file {
        let data = DataSet::read_csv(file).map_err(&err)?;
        ctx.io.inputs.push(Artifact {
            path: file.display().to_string(),
            sha256: super::sha256_hex(&std::fs::read(file).map_err(|e| PipelineError::validation(e.to_string()))?),
        });
        return ctx.write(DATA_FILE, &data.to_csv());
    }
    let d = &cfg.data;
    let model = build_sidher(&cfg.model.theta).map_err(&err)?;
    let noise = NoiseSpec::uniform(d.input_noise_std, d.output_noise_std, cfg.seed);
    let (data, truth) = generate_dataset(
        &model,
        &cfg.model.x0,
        &NominalInput,
        d.t0,
        d.t1,
        d.sample_dt,
        &noise,
        &StepControl::default(),
    )
    .map_err(&err)?;
    ctx.write(DATA_FILE, &data.to_csv())?;
    ctx.write(TRUTH_FILE, &truth.to_csv(true))
}

/// Uniform draw from the interior of the unit simplex in `n` dimensions.
fn simplex_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentifyPoint {
    pub x0: Vec<f64>,
    pub report: RankReport,
}

fn identify(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let err = in_stage(ctx.stage);
    let d = &cfg.data;
    let times = uniform_grid(d.t0, d.t1, cfg.identify.sample_dt).map_err(&err)?;
    let (theta, input): (ParameterVector, Box<dyn InputSignal>) = if cfg.synthetic() {
        (cfg.model.theta, Box::new(NominalInput))
    } else {
        let data = ctx.read_data()?;
        (cfg.estimate.fit.theta_init, Box::new(data.input_signal()))
    };
    let opts = RankTestOptions {
        fd_step: cfg.identify.fd_step,
        tol: cfg.identify.tol,
        ..RankTestOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::new();
    for _ in 0..cfg.identify.points {
        let x0 = simplex_point(&mut rng, 6);
        let report = local_rank_test(&SidherFamily, &x0, &theta.to_array(), input.as_ref(), &times, &opts)
            .map_err(&err)?;
        points.push(IdentifyPoint { x0, report });
    }
    ctx.write_json(IDENTIFIABILITY_FILE, &points)?;
    ctx.write(PATTERN_FILE, &points[0].report.zero_pattern_csv())?;
    if let Some(p) = points.iter().find(|p| p.report.verdict != Verdict::IdentifiableObservable) {
        return Err(ctx.fail(format!(
            "rank {} < {} at x0 = {:?}",
            p.report.numerical_rank, p.report.jacobian_cols, p.x0
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub closed_form_rates: Option<ClosedFormRates>,
    pub result: EstimationResult,
}

fn estimate(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let err = in_stage(ctx.stage);
    let data = ctx.read_data()?;
    let mut fit = cfg.estimate.fit.clone();
    fit.seed = cfg.seed;
    let rates = if cfg.estimate.closed_form_rates {
        let r = closed_form_rates_with(&data, cfg.estimate.closed_form_variant).map_err(&err)?;
        fit.fixed_params.extend(r.as_fixed_params());
        Some(r)
    } else {
        None
    };
    let result = fit_parameters(&data, &fit).map_err(&err)?;
    let truth = cfg.synthetic().then_some(&cfg.model.theta);
    ctx.write(PARAMETERS_FILE, &result.table_csv(truth))?;
    ctx.write_json(
        ESTIMATION_FILE,
        &EstimateRecord {
            closed_form_rates: rates,
            result,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub lipschitz: f64,
    pub lipschitz_computed: bool,
    pub margin: f64,
    pub status: SdpStatus,
    pub objective: f64,
    pub gap_bound: f64,
    pub newton_steps: usize,
    pub constraint_margins: Vec<(String, f64)>,
    pub verification: Option<Verification>,
}

fn observer_model(cfg: &PipelineConfig, theta: &ParameterVector) -> crate::Result<StructuredModel> {
    let m = build_sidher(theta)?;
    match &cfg.observer.output_matrix {
        Some(c) => m.with_output_matrix(c.to_matrix()?),
        None => Ok(m),
    }
}

fn design_observer(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let err = in_stage(ctx.stage);
    let theta = ctx.read_theta_hat()?;
    let model = observer_model(cfg, &theta).map_err(&err)?;
    let (lipschitz, computed) = match cfg.observer.lipschitz {
        Some(l) => (l, false),
        None => (
            estimate_lipschitz(&model, &cfg.lipschitz_domain(), cfg.observer.lipschitz_grid)
                .map_err(&err)?
                .value,
            true,
        ),
    };
    ctx.write_json(OBSERVER_MODEL_FILE, &model.to_document())?;
    let problem = assemble_sdp(&model, lipschitz, cfg.observer.margin).map_err(&err)?;
    let syn = solve_observer_sdp(&problem).map_err(&err)?;
    let verification = syn
        .gains
        .as_ref()
        .map(|g| verify_gains(g, &problem, cfg.observer.verify_tol));
    ctx.write_json(
        SYNTHESIS_FILE,
        &SynthesisRecord {
            lipschitz,
            lipschitz_computed: computed,
            margin: cfg.observer.margin,
            status: syn.status.clone(),
            objective: syn.objective,
            gap_bound: syn.gap_bound,
            newton_steps: syn.newton_steps,
            constraint_margins: syn.constraint_margins.clone(),
            verification: verification.clone(),
        },
    )?;
    let gains = match (syn.gains, verification) {
        (Some(g), Some(v)) if v.passed => g,
        (Some(_), Some(v)) => {
            return Err(ctx.fail(format!("gains fail verification: {}", v.violated().join(", "))));
        }
        _ => return Err(ctx.fail(format!("observer SDP not solved: {:?}", syn.status))),
    };
    ctx.write_json(GAINS_FILE, &gains)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverSummary {
    pub x_hat0: Vec<f64>,
    pub t_final: f64,
    pub x_hat_final: Vec<f64>,
    /// ‖x − x̂‖ at the last sample (synthetic mode only).
    pub terminal_error: Option<f64>,
    pub max_error: Option<f64>,
}

fn output_tracking_csv(data: &DataSet, y_hat: &[Vec<f64>]) -> String {
    let n_y = data.n_y();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_y).map(|i| format!("y{i}")));
    header.extend((1..=n_y).map(|i| format!("yhat{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for (k, yh) in y_hat.iter().enumerate() {
        let mut row = vec![data.times[k]];
        row.extend(&data.y_bar[k]);
        row.extend(yh);
        out.push_str(&csv_row(&row));
    }
    out
}

fn observe(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let err = in_stage(ctx.stage);
    let data = ctx.read_data()?;
    let truth = ctx.read_truth()?;
    let doc = ctx.read_json(Stage::DesignObserver, OBSERVER_MODEL_FILE)?;
    let model = StructuredModel::from_document(&doc).map_err(&err)?;
    let gains: ObserverGains = ctx.read_json(Stage::DesignObserver, GAINS_FILE)?;
    let x_hat0 = cfg
        .observer
        .initial_state
        .clone()
        .unwrap_or_else(|| guess_initial_state(&data, cfg.seed));
    let run = run_observer(&gains, &model, &data, &x_hat0, truth.as_ref(), &StepControl::default()).map_err(&err)?;
    ctx.write(STATE_ESTIMATE_FILE, &run.to_csv())?;
    ctx.write(OUTPUT_TRACKING_FILE, &output_tracking_csv(&data, &run.y_hat))?;
    if let Some(f) = &run.failure {
        return Err(ctx.fail(format!("observer integration failed at t = {}: {}", f.time, f.reason)));
    }
    let norms = run.error_norms();
    ctx.write_json(
        OBSERVER_SUMMARY_FILE,
        &ObserverSummary {
            x_hat0,
            t_final: *run.times.last().expect("nonempty run"),
            x_hat_final: run.x_hat.last().expect("nonempty run").clone(),
            terminal_error: norms.as_ref().and_then(|n| n.last().copied()),
            max_error: norms.map(|n| n.iter().cloned().fold(0.0, f64::max)),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub values: Vec<f64>,
    pub cost: f64,
    pub max_violation: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub t_start: f64,
    pub x_init: Vec<f64>,
    pub policy: ControlPolicy,
    pub cost: f64,
    pub constraint_report: ConstraintReport,
    pub solver: SolverInfo,
    pub initial_guess: ControlPolicy,
    pub initial_cost: f64,
    pub baseline: BaselineReport,
}

fn control(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let err = in_stage(ctx.stage);
    let theta = ctx.read_theta_hat()?;
    let summary: ObserverSummary = ctx.read_json(Stage::Observe, OBSERVER_SUMMARY_FILE)?;
    let estimate_csv = ctx.read(Stage::Observe, STATE_ESTIMATE_FILE)?;
    let spec = cfg.ocp_spec(&theta, summary.x_hat_final.clone()).map_err(&err)?;
    let tol = cfg.ocp.options.feasibility_tolerance;

    let base = shoot(&spec, &spec.constant(&cfg.ocp.baseline)).map_err(&err)?;
    let baseline = BaselineReport {
        values: cfg.ocp.baseline.clone(),
        cost: base.cost,
        max_violation: base.max_violation(),
        feasible: base.failure.is_none() && base.max_violation() <= tol,
    };
    let sol = solve_ocp(&spec, &cfg.ocp.options).map_err(&err)?;
    ctx.write(POLICY_FILE, &sol.policy.to_csv())?;
    ctx.write(PREDICTED_FILE, &sol.predicted.to_csv(true))?;
    ctx.write(FORECAST_FILE, &forecast_csv(cfg, &estimate_csv, &sol.predicted, spec.t_end())?)?;
    let status = sol.solver.status.clone();
    ctx.write_json(
        OCP_FILE,
        &ControlSummary {
            t_start: spec.t_start,
            x_init: spec.x_init.clone(),
            policy: sol.policy,
            cost: sol.cost,
            constraint_report: sol.constraint_report,
            solver: sol.solver,
            initial_guess: sol.initial_guess,
            initial_cost: sol.initial_cost,
            baseline,
        },
    )?;
    if let OcpStatus::Infeasible { constraint, violation } = status {
        return Err(ctx.fail(format!("no feasible policy: {constraint} violated by {violation:.3e}")));
    }
    Ok(())
}

/// Polynomial forecast of one estimated state over the control horizon, next
/// to the model prediction under the optimal policy.
fn forecast_csv(cfg: &PipelineConfig, estimate_csv: &str, predicted: &Trajectory, t_end: f64) -> Result<String, PipelineError> {
    let err = in_stage(Stage::Control);
    let (header, rows) = parse_table(estimate_csv, STATE_ESTIMATE_FILE).map_err(&err)?;
    let col_name = format!("xhat{}", cfg.forecast.state + 1);
    let col = header
        .iter()
        .position(|h| *h == col_name)
        .ok_or_else(|| PipelineError::validation(format!("{STATE_ESTIMATE_FILE} lacks column {col_name}")))?;
    let series: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[col])).collect();
    let t1 = series.last().map_or(cfg.data.t1, |p| p.0);
    let horizon = uniform_grid(t1, t_end, cfg.forecast.dt).map_err(&err)?;
    let forecast = forecast_polyfit(&series, cfg.forecast.degree, &horizon).map_err(&err)?;
    let name = &state_names(6)[cfg.forecast.state];
    let mut out = format!("t,{name}_forecast,{name}_predicted\n");
    for (t, f) in forecast {
        let p = interpolate_state(predicted, cfg.forecast.state, t);
        out.push_str(&csv_row(&[t, f, p]));
    }
    Ok(out)
}

fn interpolate_state(traj: &Trajectory, state: usize, t: f64) -> f64 {
    let k = traj.times.partition_point(|&s| s < t);
    if k == 0 {
        return traj.states[0][state];
    }
    if k >= traj.times.len() {
        return traj.final_state()[state];
    }
    let (ta, tb) = (traj.times[k - 1], traj.times[k]);
    let w = (t - ta) / (tb - ta);
    (1.0 - w) * traj.states[k - 1][state] + w * traj.states[k][state]
}
