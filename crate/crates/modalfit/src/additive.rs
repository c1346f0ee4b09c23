//! Additive transfer-matrix models: sums of low-order submodels with
//! disjoint pole sets.
//!
//! The model is P(s) = Σᵢ Bᵢ(s) / (s^ℓᵢ · Aᵢ(s)) where each Aᵢ is a stable
//! scalar polynomial with constant term fixed to 1 (that normalization makes
//! the parametrization unique), Bᵢ is a matrix polynomial, and ℓᵢ counts pure
//! integrators. Structural rules: at most one submodel carries integrators
//! and at most one is biproper, so the sum has a proper-plus-feedthrough
//! shape overall.
//!
//! The per-submodel parameter vector is θᵢ = [aᵢ₁ … aᵢₙ, vec(Bᵢ₀)ᵀ, …,
//! vec(Bᵢₘ)ᵀ]ᵀ with column-major vec; the full β stacks the θᵢ. All
//! estimation code in [`crate::riv`] works on this layout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::frf::{FrfDataset, Weight};
use crate::{C64, Error, Result, linalg};

/// Minimum relative distance between denominator roots of different
/// submodels. Closer than this counts as a shared pole, which breaks the
/// uniqueness of the additive decomposition.
pub const SHARED_ROOT_TOL: f64 = 1e-8;

fn c64(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Orders of a single submodel Bᵢ(s)/(s^ℓᵢ·Aᵢ(s)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmodelOrders {
    /// Degree of Aᵢ (number of free denominator coefficients).
    pub den_order: usize,
    /// Degree of Bᵢ; the numerator has `num_order + 1` matrix coefficients.
    pub num_order: usize,
    /// Number of pure integrators ℓᵢ.
    pub integrators: usize,
}

impl SubmodelOrders {
    /// Biproper means the numerator degree reaches the full denominator
    /// degree ℓ + n (the submodel has a feedthrough term).
    pub fn is_biproper(&self) -> bool {
        self.num_order >= self.den_order + self.integrators
    }
}

/// Shape of an additive model: response dimensions plus per-submodel orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdditiveStructure {
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub submodels: Vec<SubmodelOrders>,
}

impl AdditiveStructure {
    pub fn validate(&self) -> Result<()> {
        if self.n_outputs == 0 || self.n_inputs == 0 {
            return Err(Error::Model(
                "additive structure needs at least one output and one input".into(),
            ));
        }
        if self.submodels.is_empty() {
            return Err(Error::Model("additive structure has no submodels".into()));
        }
        let with_integrators = self
            .submodels
            .iter()
            .filter(|o| o.integrators > 0)
            .count();
        if with_integrators > 1 {
            return Err(Error::Model(format!(
                "{with_integrators} submodels carry integrators; at most one may"
            )));
        }
        let biproper = self.submodels.iter().filter(|o| o.is_biproper()).count();
        if biproper > 1 {
            return Err(Error::Model(format!(
                "{biproper} submodels are biproper; at most one may be"
            )));
        }
        Ok(())
    }

    /// Entries in one response matrix.
    pub fn q(&self) -> usize {
        self.n_outputs * self.n_inputs
    }

    /// Length of θᵢ.
    pub fn theta_len(&self, i: usize) -> usize {
        let o = &self.submodels[i];
        o.den_order + (o.num_order + 1) * self.q()
    }

    /// Offset of θᵢ inside the stacked β.
    pub fn theta_offset(&self, i: usize) -> usize {
        (0..i).map(|j| self.theta_len(j)).sum()
    }

    /// Total parameter count dim(β).
    pub fn beta_len(&self) -> usize {
        (0..self.submodels.len()).map(|i| self.theta_len(i)).sum()
    }
}

/// Parameters of one submodel.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelParams {
    /// Denominator coefficients a₁ … aₙ of A(s) = 1 + a₁s + … + aₙsⁿ.
    pub den: DVector<f64>,
    /// Numerator matrix coefficients B₀ … Bₘ.
    pub num: Vec<DMatrix<f64>>,
}

/// A fully parametrized additive model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveParameters {
    pub structure: AdditiveStructure,
    pub submodels: Vec<SubmodelParams>,
}

impl AdditiveParameters {
    /// Bind parameters to a structure, checking dimensions only. Dynamic
    /// validity (stability, disjoint poles) is a separate concern — see
    /// [`AdditiveParameters::validate_dynamics`] — because intermediate
    /// iterates of the estimator legitimately violate it.
    pub fn new(structure: AdditiveStructure, submodels: Vec<SubmodelParams>) -> Result<Self> {
        structure.validate()?;
        if submodels.len() != structure.submodels.len() {
            return Err(Error::Model(format!(
                "{} parameter blocks for {} submodels",
                submodels.len(),
                structure.submodels.len()
            )));
        }
        let (ny, nu) = (structure.n_outputs, structure.n_inputs);
        for (i, (o, p)) in structure.submodels.iter().zip(&submodels).enumerate() {
            if p.den.len() != o.den_order {
                return Err(Error::Model(format!(
                    "submodel {i}: {} denominator coefficients, expected {}",
                    p.den.len(),
                    o.den_order
                )));
            }
            if p.num.len() != o.num_order + 1 {
                return Err(Error::Model(format!(
                    "submodel {i}: {} numerator coefficients, expected {}",
                    p.num.len(),
                    o.num_order + 1
                )));
            }
            for (pdeg, b) in p.num.iter().enumerate() {
                if b.shape() != (ny, nu) {
                    return Err(Error::Model(format!(
                        "submodel {i}: numerator coefficient {pdeg} has shape {:?}, expected ({ny}, {nu})",
                        b.shape()
                    )));
                }
            }
            if p.den.iter().any(|x| !x.is_finite())
                || p.num.iter().flat_map(|b| b.iter()).any(|x| !x.is_finite())
            {
                return Err(Error::Model(format!("submodel {i}: non-finite parameter")));
            }
        }
        Ok(AdditiveParameters {
            structure,
            submodels,
        })
    }

    /// Stack all θᵢ into a flat β.
    pub fn flatten(&self) -> DVector<f64> {
        let mut beta = DVector::zeros(self.structure.beta_len());
        let mut at = 0;
        for p in &self.submodels {
            for &a in p.den.iter() {
                beta[at] = a;
                at += 1;
            }
            for b in &p.num {
                for &x in b.as_slice() {
                    beta[at] = x;
                    at += 1;
                }
            }
        }
        beta
    }

    /// Rebuild parameters from a flat β for the given structure.
    pub fn unflatten(structure: &AdditiveStructure, beta: &DVector<f64>) -> Result<Self> {
        structure.validate()?;
        if beta.len() != structure.beta_len() {
            return Err(Error::Model(format!(
                "parameter vector has length {}, structure expects {}",
                beta.len(),
                structure.beta_len()
            )));
        }
        let (ny, nu) = (structure.n_outputs, structure.n_inputs);
        let q = structure.q();
        let mut at = 0;
        let mut submodels = Vec::with_capacity(structure.submodels.len());
        for o in &structure.submodels {
            let den = DVector::from_iterator(o.den_order, (0..o.den_order).map(|p| beta[at + p]));
            at += o.den_order;
            let mut num = Vec::with_capacity(o.num_order + 1);
            for _ in 0..=o.num_order {
                num.push(DMatrix::from_column_slice(
                    ny,
                    nu,
                    &beta.as_slice()[at..at + q],
                ));
                at += q;
            }
            submodels.push(SubmodelParams { den, num });
        }
        AdditiveParameters::new(structure.clone(), submodels)
    }

    /// Aᵢ(s), the constant-1 denominator polynomial without integrators.
    pub fn den_value(&self, i: usize, s: C64) -> C64 {
        let den = &self.submodels[i].den;
        let n = den.len();
        if n == 0 {
            return c64(1.0);
        }
        let mut acc = c64(den[n - 1]);
        for p in (0..n - 1).rev() {
            acc = acc * s + c64(den[p]);
        }
        acc * s + c64(1.0)
    }

    /// The full denominator s^ℓᵢ · Aᵢ(s).
    pub fn full_den_value(&self, i: usize, s: C64) -> C64 {
        let ell = self.structure.submodels[i].integrators;
        self.den_value(i, s) * s.powu(ell as u32)
    }

    /// Bᵢ(s) as a complex matrix.
    pub fn num_value(&self, i: usize, s: C64) -> DMatrix<C64> {
        let (ny, nu) = (self.structure.n_outputs, self.structure.n_inputs);
        let mut sum = DMatrix::<C64>::zeros(ny, nu);
        let mut sp = c64(1.0);
        for b in &self.submodels[i].num {
            for r in 0..ny {
                for c in 0..nu {
                    sum[(r, c)] += c64(b[(r, c)]) * sp;
                }
            }
            sp *= s;
        }
        sum
    }

    /// Evaluate submodel `i` at a complex frequency. Fails when `s` lies on
    /// (or indistinguishably close to) a pole of that submodel.
    pub fn eval_submodel(&self, i: usize, s: C64) -> Result<DMatrix<C64>> {
        let d = self.full_den_value(i, s);
        let pole_err = || Error::PoleEvaluation {
            submodel: i,
            s_re: s.re,
            s_im: s.im,
        };
        // A zero or subnormal denominator cannot be divided through reliably.
        if !d.is_finite() || d.norm() < f64::MIN_POSITIVE {
            return Err(pole_err());
        }
        let out = self.num_value(i, s).map(|z| z / d);
        if out.iter().any(|z| !z.is_finite()) {
            return Err(pole_err());
        }
        Ok(out)
    }

    /// Evaluate the full model P(s) = Σᵢ Pᵢ(s).
    pub fn eval(&self, s: C64) -> Result<DMatrix<C64>> {
        let mut sum = DMatrix::<C64>::zeros(self.structure.n_outputs, self.structure.n_inputs);
        for i in 0..self.submodels.len() {
            sum += self.eval_submodel(i, s)?;
        }
        Ok(sum)
    }

    /// Roots of Aᵢ (integrator poles at the origin not included).
    pub fn den_roots(&self, i: usize) -> Result<Vec<C64>> {
        let den = &self.submodels[i].den;
        let mut coeffs = Vec::with_capacity(den.len() + 1);
        coeffs.push(1.0);
        coeffs.extend(den.iter().copied());
        // A trailing zero coefficient means the submodel degenerated to a
        // lower order; treat the polynomial at its structural degree.
        while coeffs.len() > 1 && coeffs[coeffs.len() - 1] == 0.0 {
            coeffs.pop();
        }
        linalg::real_poly_roots(&coeffs)
    }

    /// Check dynamic validity: every Aᵢ stable, and no two submodels share a
    /// root (within [`SHARED_ROOT_TOL`] relative distance).
    pub fn validate_dynamics(&self) -> Result<()> {
        let mut all_roots: Vec<Vec<C64>> = Vec::with_capacity(self.submodels.len());
        for i in 0..self.submodels.len() {
            let roots = self.den_roots(i)?;
            for r in &roots {
                if r.re >= 0.0 {
                    return Err(Error::Model(format!(
                        "submodel {i} is unstable: root at {:.6e}{:+.6e}j",
                        r.re, r.im
                    )));
                }
            }
            all_roots.push(roots);
        }
        for i in 0..all_roots.len() {
            for j in (i + 1)..all_roots.len() {
                for ra in &all_roots[i] {
                    for rb in &all_roots[j] {
                        let scale = ra.norm().max(rb.norm()).max(1e-300);
                        if (ra - rb).norm() <= SHARED_ROOT_TOL * scale {
                            return Err(Error::Model(format!(
                                "submodels {i} and {j} share a pole near {:.6e}{:+.6e}j",
                                ra.re, ra.im
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Residual and cost
// ---------------------------------------------------------------------------

/// Weighted output-error cost: (1/2N) Σₖ vec(E)ᴴ W(ωₖ) vec(E) with
/// E(ωₖ) = G(ωₖ) − P(jωₖ). The quadratic form is real for Hermitian weights;
/// a materially complex value indicates a broken weight matrix and errors.
pub fn cost(data: &FrfDataset, params: &AdditiveParameters, weights: &[Weight]) -> Result<f64> {
    if params.structure.n_outputs != data.n_outputs || params.structure.n_inputs != data.n_inputs {
        return Err(Error::Model(format!(
            "model is {}x{}, dataset is {}x{}",
            params.structure.n_outputs, params.structure.n_inputs, data.n_outputs, data.n_inputs
        )));
    }
    if weights.len() != data.grid.len() {
        return Err(Error::Model(format!(
            "{} weight matrices for {} frequencies",
            weights.len(),
            data.grid.len()
        )));
    }
    let n = data.grid.len();
    let mut acc = 0.0;
    for (k, &w) in data.grid.omega().iter().enumerate() {
        let s = C64::new(0.0, w);
        let p = params.eval(s)?;
        let e = DVector::from_iterator(
            data.vec_len(),
            data.responses[k].iter().zip(p.iter()).map(|(g, m)| g - m),
        );
        let (re, im) = weights[k].quadratic_form(&e);
        if im.abs() > 1e-10 * re.abs().max(1e-300) {
            return Err(Error::Numerical(format!(
                "weighted cost at frequency index {k} has imaginary part {im:e} \
                 (weight matrix is not Hermitian)"
            )));
        }
        acc += re;
    }
    Ok(acc / (2.0 * n as f64))
}

// ---------------------------------------------------------------------------
// Regressor and instrument
// ---------------------------------------------------------------------------

/// The pseudolinear regression pieces at one frequency.
///
/// For each submodel the residual satisfies vec(E) = υᵢ − Φᵢᵀ θᵢ where υᵢ is
/// column `i` of [`Regressor::upsilon`] and Φᵢ is the corresponding row block
/// of [`Regressor::phi`] — the multivariable pseudolinear identity that makes
/// each iteration of the estimator a linear solve.
pub struct Regressor {
    /// dim(β) × q, row blocks stacked per submodel.
    pub phi: DMatrix<C64>,
    /// q × K, column i is vec(G̃ᵢ)/Aᵢ.
    pub upsilon: DMatrix<C64>,
}

/// Scalar coefficient sets describing the regressor rows of one submodel at
/// one frequency; shared between the explicit builders below and the
/// structured accumulation in [`crate::riv`].
pub(crate) struct RegressorScalars {
    /// dᵢ[p] = −s^(p+1)/Aᵢ(s) for p = 0..n−1 (denominator rows).
    pub den: Vec<C64>,
    /// cᵢ[p] = s^p/(s^ℓᵢ·Aᵢ(s)) for p = 0..m (numerator rows).
    pub num: Vec<C64>,
}

impl AdditiveParameters {
    /// Compute the regressor scalar coefficients for submodel `i` at `s`.
    pub(crate) fn regressor_scalars(&self, i: usize, s: C64) -> Result<RegressorScalars> {
        let o = &self.structure.submodels[i];
        let a = self.den_value(i, s);
        let full = a * s.powu(o.integrators as u32);
        if !a.is_finite() || a.norm() < f64::MIN_POSITIVE || full.norm() < f64::MIN_POSITIVE {
            return Err(Error::PoleEvaluation {
                submodel: i,
                s_re: s.re,
                s_im: s.im,
            });
        }
        let mut den = Vec::with_capacity(o.den_order);
        let mut sp = s;
        for _ in 0..o.den_order {
            den.push(-sp / a);
            sp *= s;
        }
        let mut num = Vec::with_capacity(o.num_order + 1);
        let mut cp = c64(1.0) / full;
        for _ in 0..=o.num_order {
            num.push(cp);
            cp *= s;
        }
        Ok(RegressorScalars { den, num })
    }

    /// vec(G̃ᵢ) where G̃ᵢ = G − Σ_{j≠i} Pⱼ: the data with every *other*
    /// submodel's contribution removed.
    pub(crate) fn partial_residual_vec(&self, g: &DMatrix<C64>, i: usize, s: C64) -> Result<DVector<C64>> {
        let mut acc = g.clone();
        for j in 0..self.submodels.len() {
            if j != i {
                acc -= self.eval_submodel(j, s)?;
            }
        }
        Ok(DVector::from_column_slice(acc.as_slice()))
    }
}

/// Build the full pseudolinear regressor (Φ, Υ) at one frequency for the
/// measured response matrix `g`. Intended for small problems and tests —
/// the estimator itself accumulates normal equations without materializing
/// these matrices.
pub fn regressor(params: &AdditiveParameters, g: &DMatrix<C64>, s: C64) -> Result<Regressor> {
    let st = &params.structure;
    let q = st.q();
    let nk = st.submodels.len();
    let mut phi = DMatrix::<C64>::zeros(st.beta_len(), q);
    let mut upsilon = DMatrix::<C64>::zeros(q, nk);

    for i in 0..nk {
        let scalars = params.regressor_scalars(i, s)?;
        let gt = params.partial_residual_vec(g, i, s)?;
        let a = params.den_value(i, s);
        for (e, z) in gt.iter().enumerate() {
            upsilon[(e, i)] = z / a;
        }
        let mut row = st.theta_offset(i);
        for dp in &scalars.den {
            for e in 0..q {
                phi[(row, e)] = dp * gt[e];
            }
            row += 1;
        }
        for cp in &scalars.num {
            for e in 0..q {
                phi[(row + e, e)] = *cp;
            }
            row += q;
        }
    }
    Ok(Regressor { phi, upsilon })
}

/// Build the instrument Φ̂ at one frequency: the conjugate-transposed
/// Jacobian of vec(P) with respect to β, evaluated at the current parameters.
///
/// Its rows mirror the regressor's with two substitutions: the measured
/// vec(G̃ᵢ) is replaced by the *modeled* vec(Pᵢ) — which is what turns the
/// pseudolinear solve into an instrumental-variable step, uncorrelated with
/// the output noise — and every scalar coefficient is conjugated, which makes
/// the fixed point of the iteration a true stationary point of the weighted
/// cost.
pub fn instrument(params: &AdditiveParameters, s: C64) -> Result<DMatrix<C64>> {
    let st = &params.structure;
    let q = st.q();
    let mut phi_hat = DMatrix::<C64>::zeros(st.beta_len(), q);

    for i in 0..st.submodels.len() {
        let scalars = params.regressor_scalars(i, s)?;
        let pvec = {
            let p = params.eval_submodel(i, s)?;
            DVector::from_column_slice(p.as_slice())
        };
        let mut row = st.theta_offset(i);
        for dp in &scalars.den {
            let dpc = dp.conj();
            for e in 0..q {
                phi_hat[(row, e)] = dpc * pvec[e].conj();
            }
            row += 1;
        }
        for cp in &scalars.num {
            let cpc = cp.conj();
            for e in 0..q {
                phi_hat[(row + e, e)] = cpc;
            }
            row += q;
        }
    }
    Ok(phi_hat)
}

// ---------------------------------------------------------------------------
// Serialization (additive-v1)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AdditiveJson {
    version: String,
    n_outputs: usize,
    n_inputs: usize,
    submodels: Vec<SubmodelOrders>,
    /// Flat parameter vector in θ-stacked order, numerators column-major.
    beta: Vec<f64>,
}

pub const ADDITIVE_FORMAT: &str = "additive-v1";

pub fn to_json(params: &AdditiveParameters) -> Result<String> {
    let doc = AdditiveJson {
        version: ADDITIVE_FORMAT.to_string(),
        n_outputs: params.structure.n_outputs,
        n_inputs: params.structure.n_inputs,
        submodels: params.structure.submodels.clone(),
        beta: params.flatten().iter().copied().collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(e.to_string()))
}

pub fn from_json(text: &str) -> Result<AdditiveParameters> {
    let doc: AdditiveJson =
        serde_json::from_str(text).map_err(|e| Error::parse("additive json", e.to_string()))?;
    if doc.version != ADDITIVE_FORMAT {
        return Err(Error::parse(
            "additive json",
            format!("version {:?}, expected {ADDITIVE_FORMAT:?}", doc.version),
        ));
    }
    let structure = AdditiveStructure {
        n_outputs: doc.n_outputs,
        n_inputs: doc.n_inputs,
        submodels: doc.submodels,
    };
    let params =
        AdditiveParameters::unflatten(&structure, &DVector::from_vec(doc.beta))?;
    params.validate_dynamics()?;
    Ok(params)
}
