//! `modalfit` — modal identification from frequency response data.
//!
//! Every subcommand reads one JSON config file and writes its artifacts into
//! an output directory. Runs are deterministic: the same config and seed
//! produce byte-identical files.

mod artifacts;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use num_complex::Complex;

use modalfit::frf::{self, FrfDataset};
use modalfit::pipeline::{self, FitProgress};
use modalfit::{additive, modal, realize, synth};

use config::{CmifConfig, EvalConfig, FitConfig, RealizeConfig, SynthConfig};

#[derive(Parser)]
#[command(
    name = "modalfit",
    version,
    about = "Two-stage modal identification of flexible mechanical systems from FRF data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a modal model to an FRF dataset (two-stage pipeline).
    Fit(CommonArgs),
    /// Generate a random modal system and simulate FRF measurements of it.
    Synth(CommonArgs),
    /// Write the complex-mode indicator curves of a dataset.
    Cmif(CommonArgs),
    /// Evaluate a stored model (modal, additive, or state-space) on a grid.
    Eval(CommonArgs),
    /// Convert a modal model to a real state-space realization.
    Realize(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config file's `out` field.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for stochastic steps.
    #[arg(long)]
    seed: Option<u64>,
}

/// Process-level failure with its exit code: 2 config, 3 numerical, 4 I/O.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Numerical(m) => write!(f, "numerical: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
        }
    }
}

impl From<modalfit::Error> for CliError {
    fn from(e: modalfit::Error) -> Self {
        use modalfit::Error as E;
        match &e {
            E::Config(_) | E::Grid(_) => CliError::Config(e.to_string()),
            E::Io { .. } | E::Parse { .. } | E::Dataset(_) => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Cmif(a) => cmd_cmif(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Realize(a) => cmd_realize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Resolve the output directory (flag beats config) and create it.
fn out_dir(flag: &Option<PathBuf>, cfg: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| CliError::Config("no output directory: set `out` or pass --out".into()))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn cmd_fit(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: FitConfig = config::load(&args.config)?;
    require_file(&cfg.frf, "FRF file")?;
    let dir = out_dir(&args.out, &cfg.out)?;
    let data = frf::load_frf(&cfg.frf, cfg.min_freq_hz)?;
    let settings = cfg.settings();

    let mut progress = FitProgress::default();
    match pipeline::run_fit_with_progress(&data, &settings, &mut progress) {
        Ok(outcome) => {
            let text = additive::to_json(&outcome.stage1.params)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            artifacts::write_text(&dir.join("additive.json"), &text)?;
            artifacts::write_riv_trace(&dir.join("riv_trace.csv"), &outcome.stage1.cost_trace)?;
            if let Some(cov) = &outcome.covariance {
                artifacts::write_covariance(&dir, cov, &outcome.stage1.params.structure)?;
            }
            let text = modal::to_json(&outcome.modal)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            artifacts::write_text(&dir.join("modal.json"), &text)?;
            artifacts::write_gn_trace(&dir.join("ipem_trace.csv"), &outcome.projection.gn.trace)?;
            let text = realize::to_json(&outcome.state_space)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            artifacts::write_text(&dir.join("state_space.json"), &text)?;
            artifacts::write_report(&dir.join("report.json"), &outcome, data.grid.len())?;
            Ok(())
        }
        Err(staged) => {
            artifacts::write_partial(&dir, &progress, staged.stage, &staged.error)?;
            Err(staged.error.into())
        }
    }
}

fn cmd_synth(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: SynthConfig = config::load(&args.config)?;
    let dir = out_dir(&args.out, &cfg.out)?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let spec = synth::SynthSpec {
        n_outputs: cfg.n_outputs,
        n_inputs: cfg.n_inputs,
        damping: cfg.damping_model,
        n_rigid: cfg.n_rigid,
        n_flexible: cfg.n_flexible,
        freq_range_hz: (cfg.freq_range_hz[0], cfg.freq_range_hz[1]),
        zeta_range: (cfg.zeta_range[0], cfg.zeta_range[1]),
    };
    let truth = synth::random_modal_system(&spec, seed)?;
    let grid = cfg.grid.build()?;
    // Separate stream for the measurement noise so the same system can be
    // re-simulated at different noise levels by changing only noise_level.
    let data = synth::simulate_frf(&truth, &grid, cfg.noise_level, seed ^ 0x6e6f_6973_65u64)?;
    frf::save_frf(&data, &dir.join("frf.csv"))?;
    let text = modal::to_json(&truth).map_err(|e| CliError::Numerical(e.to_string()))?;
    artifacts::write_text(&dir.join("modal_truth.json"), &text)?;
    Ok(())
}

fn cmd_cmif(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: CmifConfig = config::load(&args.config)?;
    require_file(&cfg.frf, "FRF file")?;
    let dir = out_dir(&args.out, &cfg.out)?;
    let data = frf::load_frf(&cfg.frf, cfg.min_freq_hz)?;
    let curves = frf::cmif(&data)?;
    artifacts::write_cmif(&dir.join("cmif.csv"), &curves)
}

/// The three model formats `eval` accepts, detected by the version tag.
enum AnyModel {
    Modal(modal::ModalParameters),
    Additive(additive::AdditiveParameters),
    StateSpace(realize::StateSpace),
}

fn load_model(path: &Path) -> Result<AnyModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    match doc.get("version").and_then(|v| v.as_str()) {
        Some(modal::MODAL_FORMAT) => Ok(AnyModel::Modal(modal::from_json(&text)?)),
        Some(additive::ADDITIVE_FORMAT) => Ok(AnyModel::Additive(additive::from_json(&text)?)),
        Some(realize::SS_FORMAT) => Ok(AnyModel::StateSpace(realize::from_json(&text)?)),
        other => Err(CliError::Config(format!(
            "{}: version {other:?} is not one of {:?}",
            path.display(),
            [modal::MODAL_FORMAT, additive::ADDITIVE_FORMAT, realize::SS_FORMAT]
        ))),
    }
}

fn cmd_eval(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: EvalConfig = config::load(&args.config)?;
    require_file(&cfg.model, "model file")?;
    let dir = out_dir(&args.out, &cfg.out)?;
    let model = load_model(&cfg.model)?;
    let grid = cfg.grid.build()?;
    let mut responses = Vec::with_capacity(grid.len());
    for &w in grid.omega() {
        let s = Complex::new(0.0, w);
        let g: DMatrix<Complex<f64>> = match &model {
            AnyModel::Modal(m) => m.eval(s)?,
            AnyModel::Additive(m) => m.eval(s)?,
            AnyModel::StateSpace(m) => realize::eval_ss(m, s)?,
        };
        responses.push(g);
    }
    let data = FrfDataset::new(grid, responses, None)?;
    frf::save_frf(&data, &dir.join("frf.csv"))?;
    Ok(())
}

fn cmd_realize(args: &CommonArgs) -> Result<(), CliError> {
    let cfg: RealizeConfig = config::load(&args.config)?;
    require_file(&cfg.modal, "modal file")?;
    let dir = out_dir(&args.out, &cfg.out)?;
    let text = std::fs::read_to_string(&cfg.modal)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", cfg.modal.display())))?;
    let m = modal::from_json(&text)?;
    let ss = realize::realize(&m)?;
    let text = realize::to_json(&ss).map_err(|e| CliError::Numerical(e.to_string()))?;
    artifacts::write_text(&dir.join("state_space.json"), &text)
}
