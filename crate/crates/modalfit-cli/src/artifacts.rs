//! Artifact writers. JSON files carry a `version` tag; CSV files declare
//! their schema through the header row. Everything is written
//! deterministically so identical runs produce byte-identical outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use modalfit::additive::AdditiveStructure;
use modalfit::frf::{CmifCurves, PickedMode};
use modalfit::ipem::GnTraceRow;
use modalfit::modal::{DampingModel, ModalParameters};
use modalfit::pipeline::{FitOutcome, FitProgress};
use modalfit::riv::{self, CovarianceEstimate};

use crate::CliError;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush()
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Shortest float text that round-trips.
fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn write_riv_trace(path: &Path, trace: &[f64]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "cost"]).ok();
    for (i, c) in trace.iter().enumerate() {
        w.write_record([i.to_string(), fmt(*c)]).ok();
    }
    finish(w, path)
}

pub fn write_gn_trace(path: &Path, trace: &[GnTraceRow]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "objective", "step_size", "param_rel_change"])
        .ok();
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            fmt(r.objective),
            fmt(r.step_size),
            fmt(r.param_rel_change),
        ])
        .ok();
    }
    finish(w, path)
}

#[derive(Serialize)]
struct CovarianceIndex<'a> {
    version: &'static str,
    relative_only: bool,
    /// Human-readable name of each row/column of the covariance matrix.
    parameters: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

/// `covariance.csv` holds `row,col,value` triplets of the symmetric matrix
/// (full, not just one triangle); `covariance_index.json` names the axes.
pub fn write_covariance(
    dir: &Path,
    cov: &CovarianceEstimate,
    structure: &AdditiveStructure,
) -> Result<(), CliError> {
    let path = dir.join("covariance.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["row", "col", "value"]).ok();
    for i in 0..cov.matrix.nrows() {
        for j in 0..cov.matrix.ncols() {
            w.write_record([i.to_string(), j.to_string(), fmt(cov.matrix[(i, j)])])
                .ok();
        }
    }
    finish(w, &path)?;

    let index = CovarianceIndex {
        version: "covariance-index-v1",
        relative_only: cov.relative_only,
        parameters: (0..cov.matrix.nrows())
            .map(|i| riv::describe_parameter(structure, i))
            .collect(),
        note: None,
    };
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    write_text(&dir.join("covariance_index.json"), &text)
}

pub fn write_cmif(path: &Path, curves: &CmifCurves) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let n_sv = curves.values.ncols();
    let mut header = vec!["freq_hz".to_string()];
    for i in 1..=n_sv {
        header.push(format!("sv{i}_squared"));
    }
    w.write_record(&header).ok();
    for k in 0..curves.grid.len() {
        let mut row = vec![fmt(curves.grid.hz()[k])];
        for i in 0..n_sv {
            row.push(fmt(curves.values[(k, i)]));
        }
        w.write_record(&row).ok();
    }
    finish(w, path)
}

// ---------------------------------------------------------------------------
// fit-report-v1
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PickedModeReport {
    frequency_hz: f64,
    bin: usize,
    multiplicity: usize,
}

#[derive(Serialize)]
struct Stage1Report {
    final_cost: f64,
    converged: bool,
    iterations: usize,
    cost_trace: Vec<f64>,
}

#[derive(Serialize)]
struct GnTraceReport {
    iteration: usize,
    objective: f64,
    step_size: f64,
    param_rel_change: f64,
}

#[derive(Serialize)]
struct Stage2Report {
    final_objective: f64,
    status: String,
    identity_weighted: bool,
    objective_trace: Vec<GnTraceReport>,
}

#[derive(Serialize)]
struct ModeReport {
    index: usize,
    natural_frequency_hz: f64,
    damping_ratio: f64,
    /// Singular values of the residue estimate at initialization.
    residue_singular_values: Vec<f64>,
    /// Relative Frobenius mass the rank-one truncation discarded.
    discarded_mass: f64,
}

#[derive(Serialize)]
struct FitReport {
    version: &'static str,
    n_frequencies: usize,
    n_outputs: usize,
    n_inputs: usize,
    damping_model: DampingModel,
    n_rigid_modes: usize,
    init_frequencies_hz: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    picked_modes: Option<Vec<PickedModeReport>>,
    stage1: Stage1Report,
    stage2: Stage2Report,
    /// Weighted data-misfit cost of the final modal model (stage-1 scale).
    modal_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance_relative_only: Option<bool>,
    modes: Vec<ModeReport>,
    /// √(eᴴWe) of the final modal model, one entry per frequency.
    residual_norms: Vec<f64>,
    notes: Vec<String>,
}

fn picked_report(picked: &[PickedMode]) -> Vec<PickedModeReport> {
    picked
        .iter()
        .map(|p| PickedModeReport {
            frequency_hz: p.hz,
            bin: p.bin,
            multiplicity: p.multiplicity,
        })
        .collect()
}

fn mode_reports(modal: &ModalParameters, outcome: &FitOutcome) -> Vec<ModeReport> {
    modal
        .flexible
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let diag = outcome
                .projection
                .init
                .diagnostics
                .iter()
                .find(|d| d.mode_index == i);
            ModeReport {
                index: i,
                natural_frequency_hz: m.natural_frequency_hz(),
                damping_ratio: m.damping_ratio(),
                residue_singular_values: diag.map(|d| d.singular_values.clone()).unwrap_or_default(),
                discarded_mass: diag.map(|d| d.discarded_mass).unwrap_or(0.0),
            }
        })
        .collect()
}

pub fn write_report(
    path: &Path,
    outcome: &FitOutcome,
    n_frequencies: usize,
) -> Result<(), CliError> {
    let modal = &outcome.modal;
    let mut notes = outcome.notes.clone();
    notes.extend(outcome.projection.init.notes.iter().cloned());
    notes.extend(outcome.projection.notes.iter().cloned());
    let report = FitReport {
        version: "fit-report-v1",
        n_frequencies,
        n_outputs: modal.n_outputs,
        n_inputs: modal.n_inputs,
        damping_model: modal.damping,
        n_rigid_modes: modal.rigid.len(),
        init_frequencies_hz: outcome.init_frequencies_hz.clone(),
        picked_modes: outcome.picked.as_deref().map(picked_report),
        stage1: Stage1Report {
            final_cost: *outcome.stage1.cost_trace.last().unwrap_or(&f64::NAN),
            converged: outcome.stage1.converged,
            iterations: outcome.stage1.iterations,
            cost_trace: outcome.stage1.cost_trace.clone(),
        },
        stage2: Stage2Report {
            final_objective: outcome.projection.gn.objective,
            status: format!("{:?}", outcome.projection.gn.status),
            identity_weighted: outcome.projection.gn.identity_weighted,
            objective_trace: outcome
                .projection
                .gn
                .trace
                .iter()
                .map(|r| GnTraceReport {
                    iteration: r.iteration,
                    objective: r.objective,
                    step_size: r.step_size,
                    param_rel_change: r.param_rel_change,
                })
                .collect(),
        },
        modal_cost: outcome.modal_cost,
        covariance_relative_only: outcome.covariance.as_ref().map(|c| c.relative_only),
        modes: mode_reports(modal, outcome),
        residual_norms: outcome.residual_norms.clone(),
        notes,
    };
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_text(path, &text)
}

#[derive(Serialize)]
struct FailureMarker<'a> {
    version: &'static str,
    failed_after: &'a str,
    error: String,
}

/// Persist whatever a failing fit produced, plus `failed_after.json` naming
/// the stage that died.
pub fn write_partial(
    dir: &Path,
    progress: &FitProgress,
    stage: &str,
    error: &modalfit::Error,
) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    if let Some(stage1) = &progress.stage1 {
        let text = modalfit::additive::to_json(&stage1.params)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let p = dir.join("additive.json");
        write_text(&p, &text)?;
        written.push(p);
        let p = dir.join("riv_trace.csv");
        write_riv_trace(&p, &stage1.cost_trace)?;
        written.push(p);
        if let Some(cov) = &progress.covariance {
            write_covariance(dir, cov, &stage1.params.structure)?;
            written.push(dir.join("covariance.csv"));
        }
    }
    if let Some(projection) = &progress.projection {
        let text = modalfit::modal::to_json(&projection.gn.params)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let p = dir.join("modal.json");
        write_text(&p, &text)?;
        written.push(p);
        let p = dir.join("ipem_trace.csv");
        write_gn_trace(&p, &projection.gn.trace)?;
        written.push(p);
    }
    if let Some(ss) = &progress.state_space {
        let text =
            modalfit::realize::to_json(ss).map_err(|e| CliError::Numerical(e.to_string()))?;
        let p = dir.join("state_space.json");
        write_text(&p, &text)?;
        written.push(p);
    }
    let marker = FailureMarker {
        version: "failed-after-v1",
        failed_after: stage,
        error: error.to_string(),
    };
    let text =
        serde_json::to_string_pretty(&marker).map_err(|e| CliError::Numerical(e.to_string()))?;
    let p = dir.join("failed_after.json");
    write_text(&p, &text)?;
    written.push(p);
    Ok(written)
}
