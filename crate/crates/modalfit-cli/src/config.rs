//! JSON configuration files for each subcommand. Every file may carry an
//! `out` directory and a `seed`; the `--out` / `--seed` flags override them.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use modalfit::frf::{FrequencyGrid, WeightingScheme};
use modalfit::ipem::GnOptions;
use modalfit::modal::DampingModel;
use modalfit::pipeline::{FitSettings, InitMode};
use modalfit::riv::{RivOptions, Stabilization};

use crate::CliError;

pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

/// Frequency-grid description shared by `synth` and `eval`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridConfig {
    Log { f_lo: f64, f_hi: f64, n: usize },
    Linear { f_lo: f64, f_hi: f64, n: usize },
    List { frequencies_hz: Vec<f64> },
}

impl GridConfig {
    pub fn build(&self) -> modalfit::Result<FrequencyGrid> {
        match self {
            GridConfig::Log { f_lo, f_hi, n } => FrequencyGrid::log_spaced_hz(*f_lo, *f_hi, *n),
            GridConfig::Linear { f_lo, f_hi, n } => {
                FrequencyGrid::linear_spaced_hz(*f_lo, *f_hi, *n)
            }
            GridConfig::List { frequencies_hz } => FrequencyGrid::from_hz(frequencies_hz.clone()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    Cmif {
        #[serde(default = "default_prominence")]
        prominence_factor: f64,
        #[serde(default)]
        max_modes: Option<usize>,
    },
    Explicit { frequencies_hz: Vec<f64> },
}

fn default_prominence() -> f64 {
    10.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RivConfig {
    #[serde(default = "default_riv_iters")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub relative_tolerance: f64,
    #[serde(default = "default_stabilization")]
    pub stabilization: Stabilization,
}

fn default_riv_iters() -> usize {
    10
}
fn default_tolerance() -> f64 {
    1e-9
}
fn default_stabilization() -> Stabilization {
    Stabilization::Reflect
}

impl Default for RivConfig {
    fn default() -> Self {
        RivConfig {
            max_iterations: default_riv_iters(),
            relative_tolerance: default_tolerance(),
            stabilization: default_stabilization(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpemConfig {
    #[serde(default = "default_gn_iters")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub relative_tolerance: f64,
    #[serde(default = "default_rank_threshold")]
    pub rank_threshold: f64,
}

fn default_gn_iters() -> usize {
    40
}
fn default_rank_threshold() -> f64 {
    1e-10
}

impl Default for IpemConfig {
    fn default() -> Self {
        IpemConfig {
            max_iterations: default_gn_iters(),
            relative_tolerance: default_tolerance(),
            rank_threshold: default_rank_threshold(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// FRF dataset (CSV).
    pub frf: PathBuf,
    #[serde(default)]
    pub min_freq_hz: Option<f64>,
    #[serde(default)]
    pub weighting: WeightingScheme,
    pub damping_model: DampingModel,
    #[serde(default)]
    pub n_rbm: usize,
    #[serde(default)]
    pub include_dc: bool,
    pub init: InitConfig,
    #[serde(default = "default_zeta")]
    pub initial_zeta: f64,
    #[serde(default)]
    pub riv: RivConfig,
    #[serde(default)]
    pub ipem: IpemConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Accepted for interface symmetry; the fit itself is deterministic.
    #[serde(default)]
    #[allow(dead_code)]
    pub seed: Option<u64>,
}

fn default_zeta() -> f64 {
    0.01
}

impl FitConfig {
    pub fn settings(&self) -> FitSettings {
        FitSettings {
            weighting: self.weighting.clone(),
            damping: self.damping_model,
            n_rigid: self.n_rbm,
            include_dc: self.include_dc,
            init: match &self.init {
                InitConfig::Cmif {
                    prominence_factor,
                    max_modes,
                } => InitMode::Cmif {
                    prominence_factor: *prominence_factor,
                    max_modes: *max_modes,
                },
                InitConfig::Explicit { frequencies_hz } => InitMode::Explicit {
                    frequencies_hz: frequencies_hz.clone(),
                },
            },
            initial_zeta: self.initial_zeta,
            riv: RivOptions {
                max_iterations: self.riv.max_iterations,
                relative_tolerance: self.riv.relative_tolerance,
                stabilization: self.riv.stabilization,
            },
            gn: GnOptions {
                max_iterations: self.ipem.max_iterations,
                relative_tolerance: self.ipem.relative_tolerance,
                rank_threshold: self.ipem.rank_threshold,
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub damping_model: DampingModel,
    #[serde(default)]
    pub n_rigid: usize,
    pub n_flexible: usize,
    /// [low, high] natural-frequency band in Hz.
    pub freq_range_hz: [f64; 2],
    #[serde(default = "default_zeta_range")]
    pub zeta_range: [f64; 2],
    pub grid: GridConfig,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_zeta_range() -> [f64; 2] {
    [0.005, 0.05]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmifConfig {
    pub frf: PathBuf,
    #[serde(default)]
    pub min_freq_hz: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Accepted for interface symmetry; this command is deterministic.
    #[serde(default)]
    #[allow(dead_code)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Model file: modal-v1, additive-v1, or ss-v1 JSON.
    pub model: PathBuf,
    pub grid: GridConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Accepted for interface symmetry; this command is deterministic.
    #[serde(default)]
    #[allow(dead_code)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealizeConfig {
    pub modal: PathBuf,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Accepted for interface symmetry; this command is deterministic.
    #[serde(default)]
    #[allow(dead_code)]
    pub seed: Option<u64>,
}
