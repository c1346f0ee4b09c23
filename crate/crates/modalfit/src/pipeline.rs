//! End-to-end fit: weighting, pole initialization, the additive-model stage,
//! covariance transport, modal projection, and realization — with each
//! failure labeled by the stage it occurred in so callers can report where a
//! run died.

use nalgebra::DVector;

use crate::additive::{self, AdditiveStructure, SubmodelOrders};
use crate::frf::{self, FrfDataset, PickedMode, Weight, WeightingScheme, TWO_PI};
use crate::ipem::{self, GnOptions, ProjectOutcome};
use crate::modal::{DampingModel, ModalParameters};
use crate::realize::{self, StateSpace};
use crate::riv::{self, CovarianceEstimate, RivOptions, RivResult};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum InitMode {
    /// Pick candidate mode frequencies from the singular-value indicator
    /// curves of the measured FRF matrices.
    Cmif {
        prominence_factor: f64,
        max_modes: Option<usize>,
    },
    /// Caller-supplied natural frequencies in Hz.
    Explicit { frequencies_hz: Vec<f64> },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Cmif {
            prominence_factor: 10.0,
            max_modes: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub weighting: WeightingScheme,
    pub damping: DampingModel,
    pub n_rigid: usize,
    pub include_dc: bool,
    pub init: InitMode,
    /// Damping ratio seeded into every initial denominator.
    pub initial_zeta: f64,
    pub riv: RivOptions,
    pub gn: GnOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            weighting: WeightingScheme::default(),
            damping: DampingModel::General,
            n_rigid: 0,
            include_dc: false,
            init: InitMode::default(),
            initial_zeta: 0.01,
            riv: RivOptions::default(),
            gn: GnOptions::default(),
        }
    }
}

/// An error tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct StagedError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StagedError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage: {}", self.stage, self.error)
    }
}

impl std::error::Error for StagedError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn at_stage<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, StagedError> {
    r.map_err(|error| StagedError { stage, error })
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Peak-picking output when CMIF initialization was used.
    pub picked: Option<Vec<PickedMode>>,
    /// Natural frequencies (Hz) the flexible denominators were seeded with.
    pub init_frequencies_hz: Vec<f64>,
    pub stage1: RivResult,
    pub covariance: Option<CovarianceEstimate>,
    pub projection: ProjectOutcome,
    pub modal: ModalParameters,
    pub state_space: StateSpace,
    /// Weighted data-misfit cost of the final modal model, on the same scale
    /// as the stage-1 cost trace.
    pub modal_cost: f64,
    /// √(eᴴWe) against the final modal model, one entry per frequency.
    pub residual_norms: Vec<f64>,
    pub notes: Vec<String>,
}

/// Everything the fit had produced so far when an error cut it short; lets
/// callers persist partial artifacts next to the failure marker.
#[derive(Debug, Default)]
pub struct FitProgress {
    pub picked: Option<Vec<PickedMode>>,
    pub init_frequencies_hz: Option<Vec<f64>>,
    pub stage1: Option<RivResult>,
    pub covariance: Option<CovarianceEstimate>,
    pub projection: Option<ProjectOutcome>,
    pub state_space: Option<StateSpace>,
    pub notes: Vec<String>,
}

fn initial_frequencies(
    data: &FrfDataset,
    settings: &FitSettings,
) -> Result<(Vec<f64>, Option<Vec<PickedMode>>)> {
    match &settings.init {
        InitMode::Explicit { frequencies_hz } => {
            if frequencies_hz.is_empty() && settings.n_rigid == 0 {
                return Err(Error::Config(
                    "no initial frequencies and no rigid-body modes: nothing to fit".into(),
                ));
            }
            let mut f = frequencies_hz.clone();
            if f.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!(
                    "initial frequencies must be positive and finite, got {f:?}"
                )));
            }
            f.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Ok((f, None))
        }
        InitMode::Cmif {
            prominence_factor,
            max_modes,
        } => {
            let curves = frf::cmif(data)?;
            let picked = frf::pick_modes(&curves, *prominence_factor, *max_modes)?;
            if picked.is_empty() && settings.n_rigid == 0 {
                return Err(Error::Config(
                    "indicator curves show no peaks above the prominence threshold; \
                     supply explicit frequencies or lower prominence_factor"
                        .into(),
                ));
            }
            let f = picked.iter().map(|p| p.hz).collect();
            Ok((f, Some(picked)))
        }
    }
}

/// Assemble the additive structure and its seed parameters from a list of
/// initial natural frequencies: one double-integrator block when rigid-body
/// modes are requested, one second-order block per frequency (denominator
/// a₁ = 2ζ/ω, a₂ = 1/ω²), and an optional constant block. Numerators come
/// from the weighted linear fit with the denominators held fixed.
fn initial_additive(
    data: &FrfDataset,
    settings: &FitSettings,
    frequencies_hz: &[f64],
    weights: &[Weight],
) -> Result<crate::additive::AdditiveParameters> {
    let mut submodels = Vec::new();
    let mut dens = Vec::new();
    if settings.n_rigid > 0 {
        submodels.push(SubmodelOrders {
            den_order: 0,
            num_order: 0,
            integrators: 2,
        });
        dens.push(DVector::zeros(0));
    }
    let num_order = match settings.damping {
        DampingModel::General => 1,
        DampingModel::Proportional => 0,
    };
    for &f in frequencies_hz {
        let omega = TWO_PI * f;
        submodels.push(SubmodelOrders {
            den_order: 2,
            num_order,
            integrators: 0,
        });
        dens.push(DVector::from_vec(vec![
            2.0 * settings.initial_zeta / omega,
            1.0 / (omega * omega),
        ]));
    }
    if settings.include_dc {
        submodels.push(SubmodelOrders {
            den_order: 0,
            num_order: 0,
            integrators: 0,
        });
        dens.push(DVector::zeros(0));
    }
    let structure = AdditiveStructure {
        n_outputs: data.n_outputs,
        n_inputs: data.n_inputs,
        submodels,
    };
    riv::init_numerators(data, &structure, &dens, weights)
}

/// Run the full two-stage fit on a loaded dataset.
pub fn run_fit(
    data: &FrfDataset,
    settings: &FitSettings,
) -> std::result::Result<FitOutcome, StagedError> {
    run_fit_with_progress(data, settings, &mut FitProgress::default())
}

/// Like [`run_fit`], but records each intermediate result in `progress` so a
/// failing run still leaves its partial outputs behind.
pub fn run_fit_with_progress(
    data: &FrfDataset,
    settings: &FitSettings,
    progress: &mut FitProgress,
) -> std::result::Result<FitOutcome, StagedError> {
    if !(settings.initial_zeta > 0.0 && settings.initial_zeta < 1.0) {
        return Err(StagedError {
            stage: "configuration",
            error: Error::Config(format!(
                "initial_zeta must lie in (0, 1), got {}",
                settings.initial_zeta
            )),
        });
    }
    if settings.n_rigid > data.n_outputs.min(data.n_inputs) {
        return Err(StagedError {
            stage: "configuration",
            error: Error::Config(format!(
                "n_rigid = {} exceeds min(n_outputs, n_inputs) = {}",
                settings.n_rigid,
                data.n_outputs.min(data.n_inputs)
            )),
        });
    }

    let weights = at_stage("weighting", frf::build_weighting(data, &settings.weighting))?;
    let (init_frequencies_hz, picked) =
        at_stage("initialization", initial_frequencies(data, settings))?;
    progress.picked = picked.clone();
    progress.init_frequencies_hz = Some(init_frequencies_hz.clone());
    let init = at_stage(
        "initialization",
        initial_additive(data, settings, &init_frequencies_hz, &weights),
    )?;

    let stage1 = at_stage("stage1", riv::riv_iterate(data, &init, &weights, &settings.riv))?;
    progress.stage1 = Some(stage1.clone());

    // A singular information matrix only costs us the projection weighting,
    // not the fit itself, so degrade to the unweighted projection with a
    // recorded note instead of aborting.
    let covariance = match riv::covariance(data, &stage1.params) {
        Ok(c) => Some(c),
        Err(e) => {
            progress.notes.push(format!(
                "stage-1 covariance unavailable ({e}); projection ran unweighted"
            ));
            None
        }
    };
    progress.covariance = covariance.clone();

    let projection = at_stage(
        "projection",
        ipem::project(
            &stage1.params,
            covariance.as_ref(),
            settings.n_rigid,
            &settings.gn,
        ),
    )?;
    progress.projection = Some(projection.clone());
    let modal = projection.gn.params.clone();

    let state_space = at_stage("realization", realize::realize(&modal))?;
    progress.state_space = Some(state_space.clone());

    let mapped = at_stage("reporting", modal.map_to_additive())?;
    let modal_cost = at_stage("reporting", additive::cost(data, &mapped, &weights))?;
    let mut residual_norms = Vec::with_capacity(data.grid.len());
    for k in 0..data.grid.len() {
        let s = crate::C64::new(0.0, data.grid.omega()[k]);
        let g = at_stage("reporting", modal.eval(s))?;
        let e = data.vec_response(k)
            - DVector::from_column_slice(g.as_slice());
        residual_norms.push(weights[k].quadratic_form(&e).0.max(0.0).sqrt());
    }

    Ok(FitOutcome {
        picked,
        init_frequencies_hz,
        stage1,
        covariance,
        projection,
        modal,
        state_space,
        modal_cost,
        residual_norms,
        notes: progress.notes.clone(),
    })
}
