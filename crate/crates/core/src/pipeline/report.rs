//! Summary of a completed run: parameter table, estimation error, control
//! cost against the baseline and constraint margins.

use std::fmt::Write as _;
use std::path::Path;

use super::stages::{
    ControlSummary, EstimateRecord, ObserverSummary, ESTIMATION_FILE, OBSERVER_SUMMARY_FILE, OCP_FILE,
};
use super::{PipelineConfig, PipelineError, Stage, Workspace};
use crate::model::PARAM_NAMES;
use crate::sim::format_f64;

pub const REPORT_FILE: &str = "report.txt";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    /// `parameter,true,estimated,relative_error`; the last two columns of a
    /// row are empty without a truth.
    pub comparison_csv: String,
}

fn read_json<T: serde::de::DeserializeOwned>(ws: &Workspace, stage: Stage, name: &str) -> Result<T, PipelineError> {
    let text = ws.read_verified(&ws.output_of(stage, name)?)?;
    serde_json::from_str(&text).map_err(|e| PipelineError::validation(format!("malformed {name}: {e}")))
}

/// Builds the report for the run in `dir` and writes `report.txt` and
/// `comparison.csv` next to the manifest.
pub fn cmd_report(dir: &Path) -> Result<Report, PipelineError> {
    let ws = Workspace::load(dir)?;
    let missing: Vec<&str> = Stage::ALL
        .iter()
        .filter(|s| !ws.manifest.completed(**s))
        .map(|s| s.name())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::validation(format!(
            "incomplete run, missing stages: {}",
            missing.join(", ")
        )));
    }
    let integrity = ws.integrity_errors();
    if !integrity.is_empty() {
        return Err(PipelineError::validation(integrity.join("; ")));
    }
    let config_art = ws
        .manifest
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::validation("manifest has no config"))?;
    let config = PipelineConfig::from_json(&ws.read_verified(config_art)?)?;
    let est: EstimateRecord = read_json(&ws, Stage::Estimate, ESTIMATION_FILE)?;
    let obs: ObserverSummary = read_json(&ws, Stage::Observe, OBSERVER_SUMMARY_FILE)?;
    let ctl: ControlSummary = read_json(&ws, Stage::Control, OCP_FILE)?;

    let truth = config.synthetic().then_some(config.model.theta);
    let mut text = String::new();
    let mut csv = String::from("parameter,true,estimated,relative_error\n");
    let _ = writeln!(text, "Parameters");
    match truth {
        Some(_) => {
            let _ = writeln!(text, "{:<8} {:>12} {:>12} {:>10}", "name", "true", "estimated", "rel.err");
        }
        None => {
            let _ = writeln!(text, "{:<8} {:>12}", "name", "estimated");
        }
    }
    let est_values = est.result.theta_hat.to_array();
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let e = est_values[i];
        match truth {
            Some(t) => {
                let t = t.to_array()[i];
                let rel = (e - t).abs() / t.abs();
                let _ = writeln!(text, "{name:<8} {t:>12.6} {e:>12.6} {rel:>10.3e}");
                csv.push_str(&format!("{name},{},{},{}\n", format_f64(t), format_f64(e), format_f64(rel)));
            }
            None => {
                let _ = writeln!(text, "{name:<8} {e:>12.6}");
                csv.push_str(&format!("{name},,{},\n", format_f64(e)));
            }
        }
    }
    let _ = writeln!(text);
    let _ = writeln!(text, "State estimate at t = {}", obs.t_final);
    let _ = writeln!(text, "  x_hat = {:.6?}", obs.x_hat_final);
    match obs.terminal_error {
        Some(e) => {
            let _ = writeln!(text, "  terminal estimation error = {e:.3e}");
        }
        None => {
            let _ = writeln!(text, "  terminal estimation error = n/a (no truth)");
        }
    }
    let _ = writeln!(text);
    let _ = writeln!(text, "Optimal control from t = {}", ctl.t_start);
    let _ = writeln!(text, "  status = {:?}, iterations = {}", ctl.solver.status, ctl.solver.iterations);
    let _ = writeln!(text, "  optimal cost = {:.6}", ctl.cost);
    let _ = writeln!(
        text,
        "  baseline {:?}: cost = {:.6} ({})",
        ctl.baseline.values,
        ctl.baseline.cost,
        if ctl.baseline.feasible {
            "feasible".to_string()
        } else {
            format!("infeasible, violation {:.3e}", ctl.baseline.max_violation)
        }
    );
    let _ = writeln!(text, "  initial guess cost = {:.6}", ctl.initial_cost);
    for l in &ctl.constraint_report.limits {
        let _ = writeln!(
            text,
            "  {} <= {}: max {:.6}, margin {:.3e}",
            l.name, l.limit, l.max_value, l.margin
        );
    }
    ws.write_raw(REPORT_FILE, text.as_bytes())?;
    ws.write_raw(COMPARISON_FILE, csv.as_bytes())?;
    Ok(Report {
        text,
        comparison_csv: csv,
    })
}
