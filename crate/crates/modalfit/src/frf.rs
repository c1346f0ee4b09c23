//! Frequency response data: grids, datasets, weighting, and the complex-mode
//! indicator function used to seed pole estimates.
//!
//! The on-disk format is plain CSV, one row per matrix entry per frequency
//! (`freq_hz,out_idx,in_idx,re,im[,var]`, indices 1-based). An optional
//! companion file `<stem>.cov.csv` carries dense per-frequency noise
//! covariance blocks of the column-stacked response. Floats are written with
//! the shortest representation that round-trips, so save → load is
//! bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{C64, Error, Result};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Strictly increasing grid of positive frequencies, kept in both Hz (the
/// file format and user-facing unit) and rad/s (what every formula uses).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    hz: Vec<f64>,
    omega: Vec<f64>,
}

impl FrequencyGrid {
    pub fn from_hz(hz: Vec<f64>) -> Result<Self> {
        if hz.is_empty() {
            return Err(Error::Grid("empty frequency grid".into()));
        }
        for (i, &f) in hz.iter().enumerate() {
            if !f.is_finite() || f <= 0.0 {
                return Err(Error::Grid(format!(
                    "frequency at index {i} is {f}; grid values must be finite and positive"
                )));
            }
            if i > 0 && f <= hz[i - 1] {
                return Err(Error::Grid(format!(
                    "grid is not strictly increasing at index {i} ({} then {f})",
                    hz[i - 1]
                )));
            }
        }
        let omega = hz.iter().map(|f| TWO_PI * f).collect();
        Ok(FrequencyGrid { hz, omega })
    }

    /// `n` logarithmically spaced points over `[lo_hz, hi_hz]`.
    pub fn log_spaced_hz(lo_hz: f64, hi_hz: f64, n: usize) -> Result<Self> {
        if !(lo_hz.is_finite() && hi_hz.is_finite()) || lo_hz <= 0.0 || hi_hz <= lo_hz || n < 2 {
            return Err(Error::Grid(format!(
                "invalid log spacing: lo = {lo_hz}, hi = {hi_hz}, n = {n}"
            )));
        }
        let (llo, lhi) = (lo_hz.ln(), hi_hz.ln());
        let hz = (0..n)
            .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
            .collect();
        Self::from_hz(hz)
    }

    /// `n` linearly spaced points over `[lo_hz, hi_hz]`.
    pub fn linear_spaced_hz(lo_hz: f64, hi_hz: f64, n: usize) -> Result<Self> {
        if !(lo_hz.is_finite() && hi_hz.is_finite()) || lo_hz <= 0.0 || hi_hz <= lo_hz || n < 2 {
            return Err(Error::Grid(format!(
                "invalid linear spacing: lo = {lo_hz}, hi = {hi_hz}, n = {n}"
            )));
        }
        let hz = (0..n)
            .map(|i| lo_hz + (hi_hz - lo_hz) * i as f64 / (n - 1) as f64)
            .collect();
        Self::from_hz(hz)
    }

    pub fn len(&self) -> usize {
        self.hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hz.is_empty()
    }

    pub fn hz(&self) -> &[f64] {
        &self.hz
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }
}

/// Per-frequency noise covariance of the column-stacked response vec(G).
#[derive(Debug, Clone)]
pub enum NoiseCov {
    /// Variances of each vec entry (uncorrelated noise).
    Diagonal(Vec<DVector<f64>>),
    /// Full Hermitian PSD blocks, one `q × q` matrix per frequency.
    Dense(Vec<DMatrix<C64>>),
}

/// A multivariable frequency response measurement.
#[derive(Debug, Clone)]
pub struct FrfDataset {
    pub grid: FrequencyGrid,
    pub n_outputs: usize,
    pub n_inputs: usize,
    /// `responses[k]` is the `n_outputs × n_inputs` response at grid point k.
    pub responses: Vec<DMatrix<C64>>,
    pub noise_cov: Option<NoiseCov>,
}

impl FrfDataset {
    pub fn new(
        grid: FrequencyGrid,
        responses: Vec<DMatrix<C64>>,
        noise_cov: Option<NoiseCov>,
    ) -> Result<Self> {
        if responses.len() != grid.len() {
            return Err(Error::Dataset(format!(
                "{} response matrices for {} grid points",
                responses.len(),
                grid.len()
            )));
        }
        let first = responses
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        let (n_outputs, n_inputs) = first.shape();
        if n_outputs == 0 || n_inputs == 0 {
            return Err(Error::Dataset("zero-dimensional response".into()));
        }
        for (k, r) in responses.iter().enumerate() {
            if r.shape() != (n_outputs, n_inputs) {
                return Err(Error::Dataset(format!(
                    "response at frequency index {k} has shape {:?}, expected {:?}",
                    r.shape(),
                    (n_outputs, n_inputs)
                )));
            }
            if r.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::Dataset(format!(
                    "non-finite response entry at frequency index {k}"
                )));
            }
        }
        let q = n_outputs * n_inputs;
        match &noise_cov {
            None => {}
            Some(NoiseCov::Diagonal(vars)) => {
                if vars.len() != grid.len() {
                    return Err(Error::Dataset(
                        "diagonal noise covariance length does not match grid".into(),
                    ));
                }
                for (k, v) in vars.iter().enumerate() {
                    if v.len() != q {
                        return Err(Error::Dataset(format!(
                            "diagonal covariance at frequency index {k} has {} entries, expected {q}",
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                        return Err(Error::Dataset(format!(
                            "negative or non-finite variance at frequency index {k}"
                        )));
                    }
                }
            }
            Some(NoiseCov::Dense(blocks)) => {
                if blocks.len() != grid.len() {
                    return Err(Error::Dataset(
                        "dense noise covariance length does not match grid".into(),
                    ));
                }
                for (k, b) in blocks.iter().enumerate() {
                    validate_cov_block(b, q, k)?;
                }
            }
        }
        Ok(FrfDataset {
            grid,
            n_outputs,
            n_inputs,
            responses,
            noise_cov,
        })
    }

    /// Number of vec-stacked response entries per frequency.
    pub fn vec_len(&self) -> usize {
        self.n_outputs * self.n_inputs
    }

    /// Column-stacked response at grid point `k`.
    pub fn vec_response(&self, k: usize) -> DVector<C64> {
        DVector::from_column_slice(self.responses[k].as_slice())
    }

    /// Largest entry magnitude over the whole dataset.
    pub fn max_abs(&self) -> f64 {
        self.responses
            .iter()
            .flat_map(|m| m.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Check a dense covariance block: Hermitian within a small relative slack,
/// positive semidefinite up to a relative shift.
fn validate_cov_block(b: &DMatrix<C64>, q: usize, k: usize) -> Result<()> {
    if b.shape() != (q, q) {
        return Err(Error::Dataset(format!(
            "covariance block at frequency index {k} has shape {:?}, expected {q}x{q}",
            b.shape()
        )));
    }
    let scale = b.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    for i in 0..q {
        for j in 0..q {
            let asym = (b[(i, j)] - b[(j, i)].conj()).norm();
            if asym > 1e-8 * scale {
                return Err(Error::Dataset(format!(
                    "covariance block at frequency index {k} is not Hermitian at ({i},{j})"
                )));
            }
        }
    }
    // PSD up to a tiny relative diagonal shift.
    let mut shifted = b.clone();
    let shift = 1e-10 * scale;
    for i in 0..q {
        shifted[(i, i)] += C64::new(shift, 0.0);
        shifted[(i, i)] = C64::new(shifted[(i, i)].re, 0.0);
    }
    // Hermitize exactly before factorization.
    let herm = (shifted.clone() + shifted.adjoint()) * C64::new(0.5, 0.0);
    if nalgebra::Cholesky::new(herm).is_none() {
        return Err(Error::Dataset(format!(
            "covariance block at frequency index {k} is not positive semidefinite"
        )));
    }
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    let mut s = String::new();
    // `{}` prints the shortest string that parses back to the same f64.
    let _ = write!(s, "{x}");
    s
}

fn cov_companion_path(path: &Path) -> PathBuf {
    path.with_extension("cov.csv")
}

/// Write a dataset as CSV. Diagonal noise covariance becomes a sixth `var`
/// column; dense covariance goes to the `<stem>.cov.csv` companion.
pub fn save_frf(data: &FrfDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = csv::Writer::from_writer(file);
    let diag = match &data.noise_cov {
        Some(NoiseCov::Diagonal(v)) => Some(v),
        _ => None,
    };
    let mut header = vec!["freq_hz", "out_idx", "in_idx", "re", "im"];
    if diag.is_some() {
        header.push("var");
    }
    w.write_record(&header)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let (ny, nu) = (data.n_outputs, data.n_inputs);
    for (k, &f) in data.grid.hz().iter().enumerate() {
        for e in 0..ny * nu {
            let (out, inp) = (e % ny, e / ny);
            let z = data.responses[k][(out, inp)];
            let mut rec = vec![
                fmt_f64(f),
                (out + 1).to_string(),
                (inp + 1).to_string(),
                fmt_f64(z.re),
                fmt_f64(z.im),
            ];
            if let Some(vars) = diag {
                rec.push(fmt_f64(vars[k][e]));
            }
            w.write_record(&rec)
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;

    if let Some(NoiseCov::Dense(blocks)) = &data.noise_cov {
        let cov_path = cov_companion_path(path);
        let file = std::fs::File::create(&cov_path)
            .map_err(|e| Error::io(cov_path.display().to_string(), e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["freq_hz", "row", "col", "re", "im"])
            .map_err(|e| Error::parse(cov_path.display().to_string(), e.to_string()))?;
        let q = ny * nu;
        for (k, &f) in data.grid.hz().iter().enumerate() {
            for col in 0..q {
                for row in 0..q {
                    let z = blocks[k][(row, col)];
                    w.write_record(&[
                        fmt_f64(f),
                        (row + 1).to_string(),
                        (col + 1).to_string(),
                        fmt_f64(z.re),
                        fmt_f64(z.im),
                    ])
                    .map_err(|e| Error::parse(cov_path.display().to_string(), e.to_string()))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(cov_path.display().to_string(), e))?;
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    name: &str,
    raw: &str,
) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| {
        Error::parse(
            path.display().to_string(),
            format!("row {line}: cannot parse {name} from {raw:?}"),
        )
    })
}

/// Load an FRF dataset from CSV, optionally discarding rows below
/// `min_freq_hz` (rigid-body-dominated bands are usually cut this way).
///
/// The file must contain every (output, input) pair at every remaining
/// frequency, each exactly once. A `var` column, when present, must be
/// present on every row and yields a diagonal noise covariance; a
/// `<stem>.cov.csv` companion yields dense blocks instead (having both is an
/// error).
pub fn load_frf(path: &Path, min_freq_hz: Option<f64>) -> Result<FrfDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
    let with_var = match cols.as_slice() {
        ["freq_hz", "out_idx", "in_idx", "re", "im"] => false,
        ["freq_hz", "out_idx", "in_idx", "re", "im", "var"] => true,
        other => {
            return Err(Error::parse(
                path.display().to_string(),
                format!("unexpected header {other:?}"),
            ));
        }
    };

    struct Row {
        freq: f64,
        out: usize,
        inp: usize,
        value: C64,
        var: Option<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let rec = rec.map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let expected = if with_var { 6 } else { 5 };
        if rec.len() != expected {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row {line}: {} fields, expected {expected}", rec.len()),
            ));
        }
        let freq: f64 = parse_field(path, line, "freq_hz", &rec[0])?;
        if !freq.is_finite() || freq <= 0.0 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row {line}: freq_hz must be finite and positive, got {freq}"),
            ));
        }
        let out: usize = parse_field(path, line, "out_idx", &rec[1])?;
        let inp: usize = parse_field(path, line, "in_idx", &rec[2])?;
        if out == 0 || inp == 0 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row {line}: indices are 1-based"),
            ));
        }
        let re: f64 = parse_field(path, line, "re", &rec[3])?;
        let im: f64 = parse_field(path, line, "im", &rec[4])?;
        let var = if with_var {
            let v: f64 = parse_field(path, line, "var", &rec[5])?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("row {line}: var must be finite and non-negative, got {v}"),
                ));
            }
            Some(v)
        } else {
            None
        };
        if let Some(min) = min_freq_hz {
            if freq < min {
                continue;
            }
        }
        rows.push(Row {
            freq,
            out,
            inp,
            value: C64::new(re, im),
            var,
        });
    }
    if rows.is_empty() {
        return if min_freq_hz.is_some() {
            Err(Error::Config(format!(
                "no frequencies remain after truncation at {} Hz",
                min_freq_hz.unwrap()
            )))
        } else {
            Err(Error::parse(path.display().to_string(), "no data rows"))
        };
    }

    let n_outputs = rows.iter().map(|r| r.out).max().unwrap();
    let n_inputs = rows.iter().map(|r| r.inp).max().unwrap();
    let q = n_outputs * n_inputs;

    let mut freqs: Vec<f64> = rows.iter().map(|r| r.freq).collect();
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    freqs.dedup();
    let index: BTreeMap<u64, usize> = freqs
        .iter()
        .enumerate()
        .map(|(k, f)| (f.to_bits(), k))
        .collect();

    let nk = freqs.len();
    let mut responses = vec![DMatrix::<C64>::zeros(n_outputs, n_inputs); nk];
    let mut vars = vec![DVector::<f64>::zeros(q); nk];
    let mut seen = vec![false; nk * q];
    for r in &rows {
        let k = index[&r.freq.to_bits()];
        let e = (r.inp - 1) * n_outputs + (r.out - 1);
        if seen[k * q + e] {
            return Err(Error::parse(
                path.display().to_string(),
                format!(
                    "duplicate entry for freq {} Hz, out {}, in {}",
                    r.freq, r.out, r.inp
                ),
            ));
        }
        seen[k * q + e] = true;
        responses[k][(r.out - 1, r.inp - 1)] = r.value;
        if let Some(v) = r.var {
            vars[k][e] = v;
        }
    }
    if let Some(flat) = seen.iter().position(|s| !s) {
        let (k, e) = (flat / q, flat % q);
        return Err(Error::parse(
            path.display().to_string(),
            format!(
                "missing entry for freq {} Hz, out {}, in {}",
                freqs[k],
                e % n_outputs + 1,
                e / n_outputs + 1
            ),
        ));
    }

    let cov_path = cov_companion_path(path);
    let dense = if cov_path.exists() {
        if with_var {
            return Err(Error::parse(
                path.display().to_string(),
                "both an inline var column and a covariance companion file are present",
            ));
        }
        Some(load_cov_companion(&cov_path, &index, nk, q, min_freq_hz)?)
    } else {
        None
    };

    let noise_cov = if let Some(blocks) = dense {
        Some(NoiseCov::Dense(blocks))
    } else if with_var {
        Some(NoiseCov::Diagonal(vars))
    } else {
        None
    };

    FrfDataset::new(FrequencyGrid::from_hz(freqs)?, responses, noise_cov)
}

fn load_cov_companion(
    path: &Path,
    index: &BTreeMap<u64, usize>,
    nk: usize,
    q: usize,
    min_freq_hz: Option<f64>,
) -> Result<Vec<DMatrix<C64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
    if cols != ["freq_hz", "row", "col", "re", "im"] {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unexpected covariance header {cols:?}"),
        ));
    }
    let mut blocks = vec![DMatrix::<C64>::zeros(q, q); nk];
    let mut seen = vec![false; nk * q * q];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if rec.len() != 5 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row {line}: {} fields, expected 5", rec.len()),
            ));
        }
        let freq: f64 = parse_field(path, line, "freq_hz", &rec[0])?;
        if let Some(min) = min_freq_hz {
            if freq < min {
                continue;
            }
        }
        let k = *index.get(&freq.to_bits()).ok_or_else(|| {
            Error::parse(
                path.display().to_string(),
                format!("row {line}: frequency {freq} Hz is not in the dataset"),
            )
        })?;
        let row: usize = parse_field(path, line, "row", &rec[1])?;
        let col: usize = parse_field(path, line, "col", &rec[2])?;
        if row == 0 || col == 0 || row > q || col > q {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row {line}: indices must lie in 1..={q}"),
            ));
        }
        let re: f64 = parse_field(path, line, "re", &rec[3])?;
        let im: f64 = parse_field(path, line, "im", &rec[4])?;
        let flat = (k * q + (col - 1)) * q + (row - 1);
        if seen[flat] {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row {line}: duplicate covariance entry"),
            ));
        }
        seen[flat] = true;
        blocks[k][(row - 1, col - 1)] = C64::new(re, im);
    }
    if let Some(flat) = seen.iter().position(|s| !s) {
        let k = flat / (q * q);
        return Err(Error::parse(
            path.display().to_string(),
            format!("incomplete covariance block at frequency index {k}"),
        ));
    }
    for (k, b) in blocks.iter().enumerate() {
        validate_cov_block(b, q, k)?;
    }
    Ok(blocks)
}

// ---------------------------------------------------------------------------
// Weighting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// W = I.
    Identity,
    /// W = diag(vec(|G|))⁻¹, entries floored at `magnitude_floor`. This is
    /// the default: it balances resonant peaks against anti-resonant valleys
    /// on a relative scale.
    InverseMagnitude,
    /// W = diag(vec(|G|))⁻², same flooring.
    InverseMagnitudeSquared,
    /// W = Σ_G(ω)⁻¹ from the dataset's noise covariance (maximum-likelihood
    /// weighting for Gaussian noise).
    InverseVariance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingScheme {
    pub kind: WeightKind,
    /// Floor applied to |G| entries before inversion; `None` picks
    /// `1e-12 × max|G|` over the dataset.
    pub magnitude_floor: Option<f64>,
}

impl Default for WeightingScheme {
    fn default() -> Self {
        WeightingScheme {
            kind: WeightKind::InverseMagnitude,
            magnitude_floor: None,
        }
    }
}

/// One per-frequency weight matrix, stored by structure.
#[derive(Debug, Clone)]
pub enum Weight {
    /// Real non-negative diagonal.
    Diagonal(DVector<f64>),
    /// Hermitian PSD dense block.
    Dense(DMatrix<C64>),
}

impl Weight {
    /// `W v`.
    pub fn mul_vec(&self, v: &DVector<C64>) -> DVector<C64> {
        match self {
            Weight::Diagonal(w) => {
                DVector::from_iterator(v.len(), v.iter().zip(w.iter()).map(|(z, &wi)| z * wi))
            }
            Weight::Dense(w) => w * v,
        }
    }

    /// Quadratic form `vᴴ W v`, returned as (real part, imaginary part).
    /// For valid Hermitian weights the imaginary part is rounding noise.
    pub fn quadratic_form(&self, v: &DVector<C64>) -> (f64, f64) {
        match self {
            Weight::Diagonal(w) => {
                let re = v
                    .iter()
                    .zip(w.iter())
                    .map(|(z, &wi)| wi * z.norm_sqr())
                    .sum();
                (re, 0.0)
            }
            Weight::Dense(w) => {
                let wv = w * v;
                let z: C64 = v.iter().zip(wv.iter()).map(|(a, b)| a.conj() * b).sum();
                (z.re, z.im)
            }
        }
    }
}

/// Build the per-frequency weighting matrices for a dataset.
pub fn build_weighting(data: &FrfDataset, scheme: &WeightingScheme) -> Result<Vec<Weight>> {
    let q = data.vec_len();
    if let Some(floor) = scheme.magnitude_floor {
        if !floor.is_finite() || floor <= 0.0 {
            return Err(Error::Config(format!(
                "magnitude_floor must be positive, got {floor}"
            )));
        }
    }
    let floor = scheme
        .magnitude_floor
        .unwrap_or_else(|| 1e-12 * data.max_abs().max(1e-300));

    match scheme.kind {
        WeightKind::Identity => Ok((0..data.grid.len())
            .map(|_| Weight::Diagonal(DVector::from_element(q, 1.0)))
            .collect()),
        WeightKind::InverseMagnitude | WeightKind::InverseMagnitudeSquared => {
            let squared = scheme.kind == WeightKind::InverseMagnitudeSquared;
            Ok((0..data.grid.len())
                .map(|k| {
                    let g = data.vec_response(k);
                    let w = DVector::from_iterator(
                        q,
                        g.iter().map(|z| {
                            let m = z.norm().max(floor);
                            if squared { 1.0 / (m * m) } else { 1.0 / m }
                        }),
                    );
                    Weight::Diagonal(w)
                })
                .collect())
        }
        WeightKind::InverseVariance => {
            let cov = data.noise_cov.as_ref().ok_or_else(|| {
                Error::Config(
                    "inverse-variance weighting requires a dataset with noise covariance".into(),
                )
            })?;
            match cov {
                NoiseCov::Diagonal(vars) => {
                    let mut out = Vec::with_capacity(vars.len());
                    for (k, v) in vars.iter().enumerate() {
                        if v.iter().any(|&x| x <= 0.0) {
                            return Err(Error::Dataset(format!(
                                "noise covariance at frequency index {k} is singular; \
                                 inverse-variance weighting is undefined"
                            )));
                        }
                        out.push(Weight::Diagonal(DVector::from_iterator(
                            q,
                            v.iter().map(|&x| 1.0 / x),
                        )));
                    }
                    Ok(out)
                }
                NoiseCov::Dense(blocks) => {
                    let mut out = Vec::with_capacity(blocks.len());
                    for (k, b) in blocks.iter().enumerate() {
                        let inv = b.clone().try_inverse().ok_or_else(|| {
                            Error::Dataset(format!(
                                "noise covariance at frequency index {k} is singular; \
                                 inverse-variance weighting is undefined"
                            ))
                        })?;
                        // Hermitize: the inverse of a Hermitian matrix drifts
                        // slightly under finite precision.
                        let herm = (inv.clone() + inv.adjoint()) * C64::new(0.5, 0.0);
                        out.push(Weight::Dense(herm));
                    }
                    Ok(out)
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Complex-mode indicator function
// ---------------------------------------------------------------------------

/// Squared singular values of G(ω) per frequency, descending within each row.
#[derive(Debug, Clone)]
pub struct CmifCurves {
    pub grid: FrequencyGrid,
    /// `grid.len() × min(n_y, n_u)`; column 0 is the dominant curve.
    pub values: DMatrix<f64>,
}

/// Complex-mode indicator function: for each frequency, the squared singular
/// values of the response matrix. Peaks of the dominant curve sit near
/// lightly damped natural frequencies; lower curves reveal repeated modes.
pub fn cmif(data: &FrfDataset) -> Result<CmifCurves> {
    let n_sv = data.n_outputs.min(data.n_inputs);
    let mut values = DMatrix::zeros(data.grid.len(), n_sv);
    for k in 0..data.grid.len() {
        let svd = nalgebra::SVD::new(data.responses[k].clone(), false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        // nalgebra does not promise an ordering.
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (i, &sv) in s.iter().enumerate() {
            values[(k, i)] = sv * sv;
        }
    }
    Ok(CmifCurves {
        grid: data.grid.clone(),
        values,
    })
}

/// A peak selected from the dominant indicator curve.
#[derive(Debug, Clone, Copy)]
pub struct PickedMode {
    /// Peak frequency in rad/s.
    pub omega: f64,
    pub hz: f64,
    /// Grid index of the peak bin.
    pub bin: usize,
    /// Number of indicator curves showing a local maximum within ±1 bin —
    /// a repeated-mode multiplicity estimate.
    pub multiplicity: usize,
    /// Peak value of the dominant curve (squared singular value).
    pub height: f64,
}

fn is_local_max(col: nalgebra::DVectorView<f64>, i: usize) -> bool {
    i >= 1 && i + 1 < col.len() && col[i] > col[i - 1] && col[i] > col[i + 1]
}

/// Pick candidate natural frequencies from indicator curves.
///
/// A peak is a strict interior local maximum of the dominant curve exceeding
/// `prominence_factor × median(curve)`; grid boundary bins never qualify (a
/// rigid-body 1/ω⁴ tail is monotone, not a mode). When `max_modes` is given,
/// only the tallest peaks are kept. Results are sorted by frequency.
pub fn pick_modes(
    curves: &CmifCurves,
    prominence_factor: f64,
    max_modes: Option<usize>,
) -> Result<Vec<PickedMode>> {
    let n = curves.grid.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "mode picking needs at least 3 grid points, got {n}"
        )));
    }
    if !(prominence_factor > 1.0) {
        return Err(Error::Config(format!(
            "prominence_factor must exceed 1, got {prominence_factor}"
        )));
    }
    let first = curves.values.column(0);
    let mut sorted: Vec<f64> = first.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let threshold = prominence_factor * median;

    let mut peaks = Vec::new();
    for i in 1..n - 1 {
        if !is_local_max(first.as_view(), i) || !(first[i] > threshold) {
            continue;
        }
        let mut multiplicity = 0;
        for c in 0..curves.values.ncols() {
            let col = curves.values.column(c);
            let hit = (i.saturating_sub(1)..=(i + 1).min(n - 2))
                .any(|j| is_local_max(col.as_view(), j));
            if hit {
                multiplicity += 1;
            }
        }
        peaks.push(PickedMode {
            omega: curves.grid.omega()[i],
            hz: curves.grid.hz()[i],
            bin: i,
            multiplicity,
            height: first[i],
        });
    }
    if let Some(cap) = max_modes {
        peaks.sort_by(|a, b| b.height.partial_cmp(&a.height).unwrap());
        peaks.truncate(cap);
    }
    peaks.sort_by(|a, b| a.bin.cmp(&b.bin));
    Ok(peaks)
}
