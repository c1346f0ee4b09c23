//! Stage-1 estimator: iterative refined instrumental-variable fitting of
//! the additive transfer-matrix model, plus the convex numerator-only
//! initialization and the Fisher-style parameter covariance.
//!
//! Each iteration freezes the current parameters β, builds the normal
//! matrix M = Σₖ Re{Φ̂ W Φᵀ} and right side R = Σₖ Re{Φ̂ W Υ} from the
//! pseudolinear regressor Φ and the instrument Φ̂, solves M𝓑 = R, and reads
//! submodel i's refreshed parameters from block i of column i. Denominators
//! are projected back to stability after every step. The iteration is not
//! descent-guaranteed, so the full cost trace is reported rather than
//! enforced.
//!
//! For diagonal weights the normal equations are accumulated through the
//! block structure of Φ and Φ̂ (a few scalars per submodel and frequency)
//! instead of materializing the dim(β) × q factors; the dense-weight path
//! and the unit tests use the explicit factors as an independent route.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::additive::{self, AdditiveParameters, AdditiveStructure};
use crate::frf::{FrfDataset, NoiseCov, Weight};
use crate::linalg;
use crate::{C64, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stabilization {
    /// Reflect unstable denominator roots across the imaginary axis
    /// (magnitude-preserving); boundary roots are nudged into the left half
    /// plane. Works for any order.
    Reflect,
    /// Clamp denominator coefficients to small positive values. Only valid
    /// when every denominator order is ≤ 2, where positivity of the
    /// coefficients is equivalent to stability.
    Positivity,
}

#[derive(Debug, Clone)]
pub struct RivOptions {
    pub max_iterations: usize,
    /// Relative parameter-change threshold ‖β⁺ − β‖/‖β‖ for convergence.
    pub relative_tolerance: f64,
    pub stabilization: Stabilization,
}

impl Default for RivOptions {
    fn default() -> Self {
        RivOptions {
            max_iterations: 10,
            relative_tolerance: 1e-9,
            stabilization: Stabilization::Reflect,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RivResult {
    pub params: AdditiveParameters,
    /// Weighted cost per iterate; entry 0 belongs to the initial parameters.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    /// Number of update steps actually taken.
    pub iterations: usize,
}

/// Human-readable name of one entry of the flat parameter vector β.
pub fn describe_parameter(structure: &AdditiveStructure, index: usize) -> String {
    let q = structure.q();
    let ny = structure.n_outputs;
    for (i, o) in structure.submodels.iter().enumerate() {
        let off = structure.theta_offset(i);
        let len = structure.theta_len(i);
        if index < off + len {
            let local = index - off;
            if local < o.den_order {
                return format!("submodel {i} denominator a{}", local + 1);
            }
            let rest = local - o.den_order;
            let (p, e) = (rest / q, rest % q);
            return format!("submodel {i} numerator B{p}[{},{}]", e % ny, e / ny);
        }
    }
    format!("parameter {index}")
}

// ---------------------------------------------------------------------------
// Numerator-only initialization
// ---------------------------------------------------------------------------

/// Upper bound on the coupled realified system solved when the weights are
/// dense; beyond this, dense-weight initialization is refused.
const DENSE_INIT_LIMIT: usize = 4000;

/// Threshold (relative to the largest singular value) below which the
/// numerator regressor counts as rank deficient.
const INIT_RANK_TOL: f64 = 1e-10;

/// Solve the convex weighted least-squares problem for all numerator
/// matrices with the denominators held fixed at the values carried by
/// `dens` (one coefficient vector per submodel, ascending powers, constant
/// term 1 implied). Diagonal weights decouple the problem per response
/// entry; dense weights couple everything and are only accepted up to a
/// size limit.
pub fn init_numerators(
    data: &FrfDataset,
    structure: &AdditiveStructure,
    dens: &[DVector<f64>],
    weights: &[Weight],
) -> Result<AdditiveParameters> {
    structure.validate()?;
    if structure.n_outputs != data.n_outputs || structure.n_inputs != data.n_inputs {
        return Err(Error::Config(
            "model structure and dataset disagree on input/output dimensions".into(),
        ));
    }
    if dens.len() != structure.submodels.len() {
        return Err(Error::Config(format!(
            "{} denominators supplied for {} submodels",
            dens.len(),
            structure.submodels.len()
        )));
    }
    for (i, (d, o)) in dens.iter().zip(&structure.submodels).enumerate() {
        if d.len() != o.den_order {
            return Err(Error::Config(format!(
                "denominator {i} has {} coefficients, submodel order is {}",
                d.len(),
                o.den_order
            )));
        }
    }
    let n = data.grid.len();
    if weights.len() != n {
        return Err(Error::Config(format!(
            "{} weights for {} frequencies",
            weights.len(),
            n
        )));
    }

    // Skeleton parameters carrying the fixed denominators and zero
    // numerators, used to evaluate the regressor scalars.
    let zero_subs: Vec<additive::SubmodelParams> = structure
        .submodels
        .iter()
        .zip(dens)
        .map(|(o, d)| additive::SubmodelParams {
            den: d.clone(),
            num: (0..=o.num_order)
                .map(|_| DMatrix::zeros(structure.n_outputs, structure.n_inputs))
                .collect(),
        })
        .collect();
    let skeleton = AdditiveParameters::new(structure.clone(), zero_subs)?;

    // Column layout: one column per (submodel, numerator degree).
    let col_names: Vec<(usize, usize)> = structure
        .submodels
        .iter()
        .enumerate()
        .flat_map(|(i, o)| (0..=o.num_order).map(move |p| (i, p)))
        .collect();
    let ncols = col_names.len();

    // Complex coefficient matrix: coeff[(k, col)] = s^p / (s^ℓ A_i(s)).
    let mut coeff = DMatrix::<C64>::zeros(n, ncols);
    for k in 0..n {
        let s = C64::new(0.0, data.grid.omega()[k]);
        let mut col = 0;
        for i in 0..structure.submodels.len() {
            let scalars = skeleton.regressor_scalars(i, s)?;
            for &c in &scalars.num {
                coeff[(k, col)] = c;
                col += 1;
            }
        }
    }

    let all_diagonal = weights.iter().all(|w| matches!(w, Weight::Diagonal(_)));
    let num_flat: DMatrix<f64> = if all_diagonal {
        solve_init_diagonal(data, &coeff, weights, &col_names, structure)?
    } else {
        solve_init_dense(data, &coeff, weights, structure)?
    };

    // Distribute the solution back into numerator matrices.
    let subs: Vec<additive::SubmodelParams> = structure
        .submodels
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let col0 = col_names.iter().position(|&(si, _)| si == i).unwrap();
            additive::SubmodelParams {
                den: dens[i].clone(),
                num: (0..=o.num_order)
                    .map(|p| {
                        DMatrix::from_fn(structure.n_outputs, structure.n_inputs, |r, c| {
                            num_flat[(col0 + p, c * structure.n_outputs + r)]
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    AdditiveParameters::new(structure.clone(), subs)
}

/// Diagonal-weight path: one realified least-squares problem of size
/// 2N × ncols per response entry. Returns the solution as ncols × q.
fn solve_init_diagonal(
    data: &FrfDataset,
    coeff: &DMatrix<C64>,
    weights: &[Weight],
    col_names: &[(usize, usize)],
    structure: &AdditiveStructure,
) -> Result<DMatrix<f64>> {
    let n = data.grid.len();
    let ncols = coeff.ncols();
    let q = structure.q();
    let mut out = DMatrix::zeros(ncols, q);
    let mut a = DMatrix::zeros(2 * n, ncols);
    let mut b = DVector::zeros(2 * n);
    for e in 0..q {
        for k in 0..n {
            let w = match &weights[k] {
                Weight::Diagonal(d) => d[e],
                Weight::Dense(_) => unreachable!("diagonal path"),
            };
            let sw = w.sqrt();
            for c in 0..ncols {
                let z = coeff[(k, c)] * sw;
                a[(k, c)] = z.re;
                a[(n + k, c)] = z.im;
            }
            let g = data.responses[k][(e % data.n_outputs, e / data.n_outputs)] * sw;
            b[k] = g.re;
            b[n + k] = g.im;
        }
        let svd = linalg::svd_thin(&a)?;
        let smax = svd.s.max();
        if let Some(bad) = svd.s.iter().position(|&s| s <= INIT_RANK_TOL * smax) {
            // Name the parameter directions in the (near-)null space.
            let mut involved: Vec<String> = Vec::new();
            for j in bad..svd.s.len() {
                let v = svd.vt.row(j);
                let vmax = v.amax();
                for (c, &x) in v.iter().enumerate() {
                    if x.abs() >= 0.3 * vmax {
                        let (i, p) = col_names[c];
                        involved.push(format!("submodel {i} numerator degree {p}"));
                    }
                }
            }
            involved.dedup();
            return Err(Error::Numerical(format!(
                "numerator initialization is rank deficient (σ_min/σ_max = {:.2e}); \
                 indistinguishable directions involve: {}",
                svd.s.min() / smax,
                involved.join(", ")
            )));
        }
        // x = V Σ⁻¹ Uᵀ b.
        let utb = svd.u.transpose() * &b;
        let mut y = DVector::zeros(svd.s.len());
        for j in 0..svd.s.len() {
            y[j] = utb[j] / svd.s[j];
        }
        let x = svd.vt.transpose() * y;
        out.set_column(e, &x);
    }
    Ok(out)
}

/// Dense-weight path: the entries couple, so solve one normal-equation
/// system over all ncols·q unknowns.
fn solve_init_dense(
    data: &FrfDataset,
    coeff: &DMatrix<C64>,
    weights: &[Weight],
    structure: &AdditiveStructure,
) -> Result<DMatrix<f64>> {
    let n = data.grid.len();
    let ncols = coeff.ncols();
    let q = structure.q();
    let dim = ncols * q;
    if dim > DENSE_INIT_LIMIT {
        return Err(Error::Config(format!(
            "dense-weight numerator initialization would couple {dim} unknowns \
             (limit {DENSE_INIT_LIMIT}); use a diagonal weighting scheme"
        )));
    }
    // Unknown order: x[(c, e)] = x[c·q + e]. Residual at k: vec(G) − Σ_c coeff[k,c]·x_c
    // with x_c ∈ ℝ^q. Normal equations with Hermitian weight W:
    //   M[(c,e),(c',e')] = Σₖ Re{ conj(coeff[k,c])·coeff[k,c']·W[e,e'] },
    //   r[(c,e)]        = Σₖ Re{ conj(coeff[k,c])·(W vec G)[e] }.
    let mut m = DMatrix::zeros(dim, dim);
    let mut rhs = DMatrix::zeros(dim, 1);
    for k in 0..n {
        let g = data.vec_response(k);
        let wg = weights[k].mul_vec(&g);
        for c in 0..ncols {
            let cc = coeff[(k, c)].conj();
            for e in 0..q {
                rhs[(c * q + e, 0)] += (cc * wg[e]).re;
            }
            for c2 in 0..ncols {
                let gamma = cc * coeff[(k, c2)];
                match &weights[k] {
                    Weight::Diagonal(d) => {
                        for e in 0..q {
                            m[(c * q + e, c2 * q + e)] += gamma.re * d[e];
                        }
                    }
                    Weight::Dense(w) => {
                        for e in 0..q {
                            for e2 in 0..q {
                                m[(c * q + e, c2 * q + e2)] += (gamma * w[(e, e2)]).re;
                            }
                        }
                    }
                }
            }
        }
    }
    let x = linalg::solve_normal_equations(&m, &rhs, "numerator initialization")?;
    Ok(DMatrix::from_fn(ncols, q, |c, e| x[(c * q + e, 0)]))
}

// ---------------------------------------------------------------------------
// Normal-equation accumulation
// ---------------------------------------------------------------------------

/// Which matrix stands on the right of the accumulated product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RightSide {
    /// M = Σ Re{Φ̂ W Φᵀ} and R = Σ Re{Φ̂ W Υ} — one refined-IV step.
    Regressor,
    /// M = Σ Re{Φ̂ W Φ̂ᴴ} — the information matrix for the covariance.
    Instrument,
}

/// Accumulate the normal matrix (and, for [`RightSide::Regressor`], the
/// right-hand side) over all frequencies. Diagonal weights take the
/// structured path; any dense weight falls back to materializing the
/// factors per frequency.
pub(crate) fn accumulate_normal_equations(
    data: &FrfDataset,
    params: &AdditiveParameters,
    weights: &[Weight],
    right: RightSide,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let st = &params.structure;
    if st.n_outputs != data.n_outputs || st.n_inputs != data.n_inputs {
        return Err(Error::Config(
            "model structure and dataset disagree on input/output dimensions".into(),
        ));
    }
    if weights.len() != data.grid.len() {
        return Err(Error::Config(format!(
            "{} weights for {} frequencies",
            weights.len(),
            data.grid.len()
        )));
    }
    if weights.iter().all(|w| matches!(w, Weight::Diagonal(_))) {
        accumulate_structured(data, params, weights, right)
    } else {
        accumulate_dense(data, params, weights, right)
    }
}

fn accumulate_structured(
    data: &FrfDataset,
    params: &AdditiveParameters,
    weights: &[Weight],
    right: RightSide,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let st = &params.structure;
    let nk = st.submodels.len();
    let q = st.q();
    let dim = st.beta_len();
    let mut m = DMatrix::zeros(dim, dim);
    let mut r = (right == RightSide::Regressor).then(|| DMatrix::zeros(dim, nk));

    // Per-frequency workspaces, allocated once.
    let mut p_vecs: Vec<DVector<C64>> = vec![DVector::zeros(q); nk];
    let mut rv: Vec<DVector<C64>> = vec![DVector::zeros(q); nk];
    let mut y: Vec<DVector<C64>> = vec![DVector::zeros(q); nk];
    let mut z: Vec<DVector<C64>> = vec![DVector::zeros(q); nk];
    let mut sij = DMatrix::<C64>::zeros(nk, nk);
    let mut a_vals = vec![C64::new(0.0, 0.0); nk];

    for k in 0..data.grid.len() {
        let s = C64::new(0.0, data.grid.omega()[k]);
        let wd = match &weights[k] {
            Weight::Diagonal(d) => d,
            Weight::Dense(_) => unreachable!("structured path requires diagonal weights"),
        };
        let g_vec = data.vec_response(k);
        let mut total_p: DVector<C64> = DVector::zeros(q);
        for j in 0..nk {
            let p = params.eval_submodel(j, s)?;
            for (e, &v) in p.as_slice().iter().enumerate() {
                p_vecs[j][e] = v;
            }
            total_p += &p_vecs[j];
            a_vals[j] = params.den_value(j, s);
        }
        for j in 0..nk {
            for e in 0..q {
                rv[j][e] = match right {
                    RightSide::Regressor => g_vec[e] - total_p[e] + p_vecs[j][e],
                    RightSide::Instrument => p_vecs[j][e],
                };
                y[j][e] = rv[j][e] * wd[e];
                z[j][e] = p_vecs[j][e] * wd[e];
            }
        }
        for i in 0..nk {
            for j in 0..nk {
                sij[(i, j)] = p_vecs[i].dotc(&y[j]);
            }
        }

        let scalars: Vec<additive::RegressorScalars> = (0..nk)
            .map(|i| params.regressor_scalars(i, s))
            .collect::<Result<_>>()?;

        for i in 0..nk {
            let off_i = st.theta_offset(i);
            let n_i = st.submodels[i].den_order;
            let di = &scalars[i].den;
            let ci = &scalars[i].num;
            for j in 0..nk {
                let off_j = st.theta_offset(j);
                let n_j = st.submodels[j].den_order;
                let dj = &scalars[j].den;
                let cj = &scalars[j].num;

                // den(i) × den(j): Re{ d̄ᵢₚ · sᵢⱼ · dⱼₚ' }.
                for (p, dip) in di.iter().enumerate() {
                    let left = dip.conj() * sij[(i, j)];
                    for (p2, djp) in dj.iter().enumerate() {
                        m[(off_i + p, off_j + p2)] += (left * djp).re;
                    }
                }
                // den(i) × num(j): row = Re{ α · conj(zᵢ) }, α = d̄ᵢₚ·cⱼₚ'.
                for (p, dip) in di.iter().enumerate() {
                    let dipc = dip.conj();
                    for (p2, cjp) in cj.iter().enumerate() {
                        let alpha = dipc * cjp;
                        let base = off_j + n_j + p2 * q;
                        let row = off_i + p;
                        for e in 0..q {
                            m[(row, base + e)] +=
                                alpha.re * z[i][e].re + alpha.im * z[i][e].im;
                        }
                    }
                }
                // num(i) × den(j): column = Re{ α · yⱼ }, α = c̄ᵢₚ·dⱼₚ'.
                for (p, cip) in ci.iter().enumerate() {
                    let cipc = cip.conj();
                    for (p2, djp) in dj.iter().enumerate() {
                        let alpha = cipc * djp;
                        let base = off_i + n_i + p * q;
                        let col = off_j + p2;
                        for e in 0..q {
                            m[(base + e, col)] +=
                                alpha.re * y[j][e].re - alpha.im * y[j][e].im;
                        }
                    }
                }
                // num(i) × num(j): γ·W on the block diagonal.
                for (p, cip) in ci.iter().enumerate() {
                    let cipc = cip.conj();
                    for (p2, cjp) in cj.iter().enumerate() {
                        let gamma = (cipc * cjp).re;
                        let bi = off_i + n_i + p * q;
                        let bj = off_j + n_j + p2 * q;
                        for e in 0..q {
                            m[(bi + e, bj + e)] += gamma * wd[e];
                        }
                    }
                }

                // Right side: column j of R = Re{ Φ̂ᵢ W vec(G̃ⱼ)/Aⱼ }.
                if let Some(r) = r.as_mut() {
                    let inv_a = C64::new(1.0, 0.0) / a_vals[j];
                    for (p, dip) in di.iter().enumerate() {
                        r[(off_i + p, j)] += (dip.conj() * sij[(i, j)] * inv_a).re;
                    }
                    for (p, cip) in ci.iter().enumerate() {
                        let alpha = cip.conj() * inv_a;
                        let base = off_i + n_i + p * q;
                        for e in 0..q {
                            r[(base + e, j)] += (alpha * y[j][e]).re;
                        }
                    }
                }
            }
        }
    }
    Ok((m, r))
}

/// Reference route: materialize Φ, Φ̂ and Υ per frequency. Needed for dense
/// weights; doubles as the oracle the structured path is tested against.
fn accumulate_dense(
    data: &FrfDataset,
    params: &AdditiveParameters,
    weights: &[Weight],
    right: RightSide,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let st = &params.structure;
    let nk = st.submodels.len();
    let q = st.q();
    let dim = st.beta_len();
    let mut m = DMatrix::zeros(dim, dim);
    let mut r = (right == RightSide::Regressor).then(|| DMatrix::zeros(dim, nk));

    for k in 0..data.grid.len() {
        let s = C64::new(0.0, data.grid.omega()[k]);
        let w = &weights[k];
        let inst = additive::instrument(params, s)?;
        let right_mat: DMatrix<C64> = match right {
            RightSide::Regressor => {
                additive::regressor(params, &data.responses[k], s)?.phi.transpose()
            }
            RightSide::Instrument => inst.map(|z| z.conj()).transpose(),
        };
        // W applied columnwise to the right factor.
        let mut w_right = DMatrix::<C64>::zeros(q, dim);
        for c in 0..dim {
            w_right.set_column(c, &w.mul_vec(&right_mat.column(c).into_owned()));
        }
        let prod = &inst * &w_right;
        for (dst, src) in m.iter_mut().zip(prod.iter()) {
            *dst += src.re;
        }
        if let Some(r) = r.as_mut() {
            let ups = additive::regressor(params, &data.responses[k], s)?.upsilon;
            let mut w_ups = DMatrix::<C64>::zeros(q, nk);
            for c in 0..nk {
                w_ups.set_column(c, &w.mul_vec(&ups.column(c).into_owned()));
            }
            let prod = &inst * &w_ups;
            for (dst, src) in r.iter_mut().zip(prod.iter()) {
                *dst += src.re;
            }
        }
    }
    Ok((m, r))
}

// ---------------------------------------------------------------------------
// Stabilization
// ---------------------------------------------------------------------------

/// Project every denominator back into the stable set. With stable input
/// the parameters are returned bit-identically (no rebuild), so a converged
/// iteration is not perturbed.
pub fn stabilize(params: &AdditiveParameters, mode: Stabilization) -> Result<AdditiveParameters> {
    if mode == Stabilization::Positivity {
        if let Some(i) = params
            .structure
            .submodels
            .iter()
            .position(|o| o.den_order > 2)
        {
            return Err(Error::Config(format!(
                "positivity stabilization requires denominator orders ≤ 2, but submodel {i} \
                 has order {}",
                params.structure.submodels[i].den_order
            )));
        }
    }
    let mut out = params.clone();
    for i in 0..out.submodels.len() {
        match mode {
            Stabilization::Positivity => {
                let den = &mut out.submodels[i].den;
                for p in 0..den.len() {
                    if den[p] <= 0.0 {
                        let mag = den[p].abs();
                        den[p] = 1e-8 * if mag > 0.0 { mag } else { 1.0 };
                    }
                }
            }
            Stabilization::Reflect => {
                if params.structure.submodels[i].den_order == 0 {
                    continue;
                }
                let roots = params.den_roots(i)?;
                if roots.iter().all(|r| r.re < 0.0) {
                    continue;
                }
                let reflected: Vec<C64> = roots
                    .iter()
                    .map(|r| {
                        if r.re > 0.0 {
                            C64::new(-r.re, r.im)
                        } else if r.re == 0.0 {
                            C64::new(-1e-8 * r.norm().max(1.0), r.im)
                        } else {
                            *r
                        }
                    })
                    .collect();
                // Rebuild A(s) = Π (1 − s/rₖ); the constant term stays
                // exactly 1 and conjugate symmetry keeps coefficients real.
                let mut coeffs = vec![C64::new(1.0, 0.0)];
                for root in &reflected {
                    let inv = C64::new(1.0, 0.0) / root;
                    let mut next = vec![C64::new(0.0, 0.0); coeffs.len() + 1];
                    for (j, &c) in coeffs.iter().enumerate() {
                        next[j] += c;
                        next[j + 1] -= c * inv;
                    }
                    coeffs = next;
                }
                let scale = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
                if coeffs.iter().any(|c| c.im.abs() > 1e-10 * scale) {
                    return Err(Error::Numerical(format!(
                        "stabilized denominator of submodel {i} failed to come out real"
                    )));
                }
                let den = &mut out.submodels[i].den;
                for p in 0..den.len() {
                    den[p] = coeffs[p + 1].re;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The refined-IV iteration
// ---------------------------------------------------------------------------

pub fn riv_iterate(
    data: &FrfDataset,
    init: &AdditiveParameters,
    weights: &[Weight],
    options: &RivOptions,
) -> Result<RivResult> {
    init.validate_dynamics()?;
    if options.max_iterations == 0 {
        return Err(Error::Config("iteration budget must be at least 1".into()));
    }
    if !(options.relative_tolerance > 0.0) {
        return Err(Error::Config("relative tolerance must be positive".into()));
    }
    let st = init.structure.clone();
    let nk = st.submodels.len();
    let mut params = init.clone();
    let mut cost_trace = vec![additive::cost(data, &params, weights)?];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..options.max_iterations {
        let (m, r) = accumulate_normal_equations(data, &params, weights, RightSide::Regressor)?;
        let r = r.expect("regressor mode always produces a right side");
        let solution = linalg::solve_normal_equations(
            &m,
            &r,
            &format!("refined-IV normal equations, iteration {iter}"),
        )?;

        // Submodel i's refresh is block i of column i.
        let mut beta_new = DVector::zeros(st.beta_len());
        for i in 0..nk {
            let off = st.theta_offset(i);
            let len = st.theta_len(i);
            for p in 0..len {
                beta_new[off + p] = solution[(off + p, i)];
            }
        }
        let candidate = AdditiveParameters::unflatten(&st, &beta_new)?;
        let candidate = stabilize(&candidate, options.stabilization)?;
        candidate.validate_dynamics()?;

        let beta_old = params.flatten();
        let beta_cand = candidate.flatten();
        let denom = beta_old.norm();
        let rel = if denom > 0.0 {
            (beta_cand - beta_old).norm() / denom
        } else {
            f64::INFINITY
        };

        cost_trace.push(additive::cost(data, &candidate, weights)?);
        params = candidate;
        iterations = iter + 1;
        if rel < options.relative_tolerance {
            converged = true;
            break;
        }
    }

    Ok(RivResult {
        params,
        cost_trace,
        converged,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Parameter covariance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// dim(β) × dim(β) covariance of the flat parameter vector.
    pub matrix: DMatrix<f64>,
    /// True when the dataset carried no usable noise covariance, so the
    /// matrix is only meaningful up to an unknown overall scale.
    pub relative_only: bool,
}

/// Fisher-style covariance of the estimated parameters:
/// Σ̂ = [Σₖ Re{Φ̂ Σ_G⁻¹(ωₖ) Φ̂ᴴ}]⁻¹, with the instrument evaluated at the
/// final parameters. Without a (usable) noise covariance the identity
/// weight is substituted and the result flagged as relative-only.
pub fn covariance(data: &FrfDataset, params: &AdditiveParameters) -> Result<CovarianceEstimate> {
    let q = data.n_outputs * data.n_inputs;
    let n = data.grid.len();
    let (weights, relative_only) = match &data.noise_cov {
        None => (
            vec![Weight::Diagonal(DVector::from_element(q, 1.0)); n],
            true,
        ),
        Some(NoiseCov::Diagonal(vars)) => {
            let degenerate = vars
                .iter()
                .any(|v| v.iter().any(|&x| !(x > 0.0) || !x.is_finite()));
            if degenerate {
                (
                    vec![Weight::Diagonal(DVector::from_element(q, 1.0)); n],
                    true,
                )
            } else {
                (
                    vars.iter()
                        .map(|v| Weight::Diagonal(v.map(|x| 1.0 / x)))
                        .collect(),
                    false,
                )
            }
        }
        Some(NoiseCov::Dense(blocks)) => {
            let mut ws = Vec::with_capacity(n);
            for (k, b) in blocks.iter().enumerate() {
                let inv = b.clone().lu().try_inverse().ok_or_else(|| {
                    Error::Numerical(format!(
                        "noise covariance at frequency index {k} is singular"
                    ))
                })?;
                // Re-Hermitianize against inversion rounding.
                let herm = (&inv + inv.adjoint()) * C64::new(0.5, 0.0);
                ws.push(Weight::Dense(herm));
            }
            (ws, false)
        }
    };

    let (m, _) = accumulate_normal_equations(data, params, &weights, RightSide::Instrument)?;
    let sym = (&m + m.transpose()) * 0.5;
    match linalg::invert_spd(&sym) {
        Ok(inv) => Ok(CovarianceEstimate {
            matrix: inv,
            relative_only,
        }),
        Err(_) => {
            // Identify which parameter directions carry no information.
            let svd = linalg::svd_thin(&sym)?;
            let smax = svd.s.max().max(f64::MIN_POSITIVE);
            let mut involved: Vec<String> = Vec::new();
            for j in 0..svd.s.len() {
                if svd.s[j] <= 1e-10 * smax {
                    let v = svd.vt.row(j);
                    let vmax = v.amax();
                    for (c, &x) in v.iter().enumerate() {
                        if x.abs() >= 0.3 * vmax {
                            involved.push(describe_parameter(&params.structure, c));
                        }
                    }
                }
            }
            involved.dedup();
            Err(Error::Numerical(format!(
                "information matrix is singular; directions without information involve: {}",
                if involved.is_empty() {
                    "(could not be isolated)".to_string()
                } else {
                    involved.join(", ")
                }
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::additive::{SubmodelOrders, SubmodelParams};
    use crate::frf::{FrequencyGrid, WeightKind, WeightingScheme, build_weighting};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    /// Mixed structure exercising every submodel kind: a double integrator,
    /// two second-order resonances (one with a first-degree numerator), and
    /// a constant block.
    fn mixed_structure(ny: usize, nu: usize) -> AdditiveStructure {
        AdditiveStructure {
            n_outputs: ny,
            n_inputs: nu,
            submodels: vec![
                SubmodelOrders { den_order: 0, num_order: 0, integrators: 2 },
                SubmodelOrders { den_order: 2, num_order: 1, integrators: 0 },
                SubmodelOrders { den_order: 2, num_order: 0, integrators: 0 },
                SubmodelOrders { den_order: 0, num_order: 0, integrators: 0 },
            ],
        }
    }

    fn rand_mat(rng: &mut ChaCha12Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Random stable parameters on the mixed structure, resonances inside
    /// [5, 50] rad/s.
    fn mixed_params(seed: u64, ny: usize, nu: usize) -> AdditiveParameters {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let st = mixed_structure(ny, nu);
        let mut subs = Vec::new();
        for o in &st.submodels {
            let den = if o.den_order == 2 {
                let omega = 5.0 + 45.0 * rng.random::<f64>();
                let zeta = 0.02 + 0.2 * rng.random::<f64>();
                DVector::from_vec(vec![2.0 * zeta / omega, 1.0 / (omega * omega)])
            } else {
                DVector::zeros(0)
            };
            let num = (0..=o.num_order).map(|_| rand_mat(&mut rng, ny, nu)).collect();
            subs.push(SubmodelParams { den, num });
        }
        AdditiveParameters::new(st, subs).unwrap()
    }

    fn simulate(params: &AdditiveParameters, grid: &FrequencyGrid) -> FrfDataset {
        let responses = (0..grid.len())
            .map(|k| params.eval(C64::new(0.0, grid.omega()[k])).unwrap())
            .collect();
        FrfDataset::new(grid.clone(), responses, None).unwrap()
    }

    #[test]
    fn structured_accumulation_matches_explicit_factors() {
        let params = mixed_params(3, 2, 3);
        let grid = FrequencyGrid::log_spaced_hz(0.3, 12.0, 25).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        // Noisy data so G̃ differs from P.
        let mut data = simulate(&params, &grid);
        for g in &mut data.responses {
            for z in g.iter_mut() {
                *z += C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)) * 0.1;
            }
        }
        let weights = build_weighting(
            &data,
            &WeightingScheme { kind: WeightKind::InverseMagnitude, magnitude_floor: None },
        )
        .unwrap();

        for right in [RightSide::Regressor, RightSide::Instrument] {
            let (m_fast, r_fast) =
                accumulate_structured(&data, &params, &weights, right).unwrap();
            let (m_ref, r_ref) = accumulate_dense(&data, &params, &weights, right).unwrap();
            let err = (&m_fast - &m_ref).norm() / m_ref.norm();
            assert!(err < 1e-12, "normal matrix differs by {err:e} ({right:?})");
            match (r_fast, r_ref) {
                (Some(a), Some(b)) => {
                    let err = (&a - &b).norm() / b.norm();
                    assert!(err < 1e-12, "right side differs by {err:e}");
                }
                (None, None) => {}
                _ => panic!("right-side presence mismatch"),
            }
        }
    }

    #[test]
    fn numerator_init_recovers_exact_numerators() {
        let params = mixed_params(7, 2, 2);
        let grid = FrequencyGrid::log_spaced_hz(0.2, 15.0, 120).unwrap();
        let data = simulate(&params, &grid);
        let dens: Vec<DVector<f64>> =
            params.submodels.iter().map(|s| s.den.clone()).collect();

        // Diagonal path.
        let weights = build_weighting(
            &data,
            &WeightingScheme { kind: WeightKind::InverseMagnitude, magnitude_floor: None },
        )
        .unwrap();
        let est = init_numerators(&data, &params.structure, &dens, &weights).unwrap();
        let err = (est.flatten() - params.flatten()).norm() / params.flatten().norm();
        assert!(err < 1e-9, "diagonal-path init error {err:e}");

        // Dense path (identity dense blocks must reproduce the identity
        // diagonal result).
        let q = params.structure.q();
        let dense: Vec<Weight> = (0..grid.len())
            .map(|_| Weight::Dense(DMatrix::from_diagonal_element(q, q, C64::new(1.0, 0.0))))
            .collect();
        let est2 = init_numerators(&data, &params.structure, &dens, &dense).unwrap();
        let err2 = (est2.flatten() - params.flatten()).norm() / params.flatten().norm();
        assert!(err2 < 1e-9, "dense-path init error {err2:e}");
    }

    #[test]
    fn constant_model_init_is_the_weighted_mean() {
        let grid = FrequencyGrid::log_spaced_hz(1.0, 10.0, 40).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let responses: Vec<DMatrix<C64>> = (0..40)
            .map(|_| {
                DMatrix::from_fn(1, 1, |_, _| {
                    C64::new(2.0 + rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal))
                })
            })
            .collect();
        let mean_re =
            responses.iter().map(|g| g[(0, 0)].re).sum::<f64>() / responses.len() as f64;
        let data = FrfDataset::new(grid.clone(), responses, None).unwrap();
        let st = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![SubmodelOrders { den_order: 0, num_order: 0, integrators: 0 }],
        };
        let weights = build_weighting(
            &data,
            &WeightingScheme { kind: WeightKind::Identity, magnitude_floor: None },
        )
        .unwrap();
        let est = init_numerators(&data, &st, &[DVector::zeros(0)], &weights).unwrap();
        assert_relative_eq!(est.submodels[0].num[0][(0, 0)], mean_re, max_relative = 1e-12);
    }

    #[test]
    fn duplicate_submodels_make_init_rank_deficient() {
        let st = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![
                SubmodelOrders { den_order: 2, num_order: 0, integrators: 0 },
                SubmodelOrders { den_order: 2, num_order: 0, integrators: 0 },
            ],
        };
        // Identical denominators: the two numerator columns coincide.
        // (Shared roots between submodels are rejected by validate_dynamics,
        // but init works from raw denominators before any model exists.)
        let den = DVector::from_vec(vec![0.02, 0.01]);
        let grid = FrequencyGrid::log_spaced_hz(0.5, 5.0, 30).unwrap();
        let responses = (0..30)
            .map(|k| DMatrix::from_element(1, 1, C64::new(1.0 / (1.0 + k as f64), 0.1)))
            .collect();
        let data = FrfDataset::new(grid, responses, None).unwrap();
        let weights = build_weighting(
            &data,
            &WeightingScheme { kind: WeightKind::Identity, magnitude_floor: None },
        )
        .unwrap();
        let err = init_numerators(&data, &st, &[den.clone(), den], &weights).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank deficient") && msg.contains("numerator"), "{msg}");
    }

    #[test]
    fn reflect_stabilization_mirrors_roots_and_preserves_stable_input() {
        // Unstable quadratic: roots at +1 ± 10j (A = 1 + a₁s + a₂s² with
        // roots r: a₂ = 1/|r|², a₁ = −2Re(r)/|r|²).
        let norm2 = 101.0;
        let st = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![SubmodelOrders { den_order: 2, num_order: 0, integrators: 0 }],
        };
        let unstable = AdditiveParameters::new(
            st.clone(),
            vec![SubmodelParams {
                den: DVector::from_vec(vec![-2.0 / norm2, 1.0 / norm2]),
                num: vec![DMatrix::from_element(1, 1, 1.0)],
            }],
        )
        .unwrap();
        assert!(unstable.validate_dynamics().is_err());
        let fixed = stabilize(&unstable, Stabilization::Reflect).unwrap();
        fixed.validate_dynamics().unwrap();
        let mut roots = fixed.den_roots(0).unwrap();
        roots.sort_by(|a, b| a.im.partial_cmp(&b.im).unwrap());
        assert_relative_eq!(roots[1].re, -1.0, max_relative = 1e-10);
        assert_relative_eq!(roots[1].im, 10.0, max_relative = 1e-10);
        // Numerators untouched.
        assert_eq!(fixed.submodels[0].num, unstable.submodels[0].num);

        // Stable parameters pass through bit-exactly.
        let stable = mixed_params(23, 2, 2);
        let out = stabilize(&stable, Stabilization::Reflect).unwrap();
        assert_eq!(out.flatten(), stable.flatten());

        // Boundary (purely imaginary) roots get nudged left.
        let marginal = AdditiveParameters::new(
            st,
            vec![SubmodelParams {
                den: DVector::from_vec(vec![0.0, 1.0 / 25.0]),
                num: vec![DMatrix::from_element(1, 1, 1.0)],
            }],
        )
        .unwrap();
        let fixed = stabilize(&marginal, Stabilization::Reflect).unwrap();
        fixed.validate_dynamics().unwrap();
        for r in fixed.den_roots(0).unwrap() {
            assert!(r.re < 0.0 && r.re > -1e-6);
        }
    }

    #[test]
    fn positivity_stabilization_clamps_and_guards_order() {
        let st = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![SubmodelOrders { den_order: 2, num_order: 0, integrators: 0 }],
        };
        let bad = AdditiveParameters::new(
            st,
            vec![SubmodelParams {
                den: DVector::from_vec(vec![-0.5, 0.04]),
                num: vec![DMatrix::from_element(1, 1, 1.0)],
            }],
        )
        .unwrap();
        let fixed = stabilize(&bad, Stabilization::Positivity).unwrap();
        assert_relative_eq!(fixed.submodels[0].den[0], 0.5e-8, max_relative = 1e-12);
        assert_eq!(fixed.submodels[0].den[1], 0.04);
        fixed.validate_dynamics().unwrap();

        let st3 = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![SubmodelOrders { den_order: 3, num_order: 0, integrators: 0 }],
        };
        let cubic = AdditiveParameters::new(
            st3,
            vec![SubmodelParams {
                den: DVector::from_vec(vec![1.0, 1.0, 1.0]),
                num: vec![DMatrix::from_element(1, 1, 1.0)],
            }],
        )
        .unwrap();
        match stabilize(&cubic, Stabilization::Positivity) {
            Err(Error::Config(msg)) => assert!(msg.contains("order")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn noiseless_iteration_recovers_the_exact_model() {
        let truth = mixed_params(31, 2, 2);
        let grid = FrequencyGrid::log_spaced_hz(0.1, 20.0, 300).unwrap();
        let data = simulate(&truth, &grid);
        let weights = build_weighting(
            &data,
            &WeightingScheme { kind: WeightKind::InverseMagnitude, magnitude_floor: None },
        )
        .unwrap();

        // Start from denominators detuned by a few percent, numerators from
        // the convex initial fit.
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let dens: Vec<DVector<f64>> = truth
            .submodels
            .iter()
            .map(|sub| sub.den.map(|a| a * (1.0 + 0.04 * rng.random::<f64>())))
            .collect();
        let init = init_numerators(&data, &truth.structure, &dens, &weights).unwrap();
        let initial_cost = additive::cost(&data, &init, &weights).unwrap();

        let result = riv_iterate(&data, &init, &weights, &RivOptions::default()).unwrap();
        assert!(result.converged, "trace: {:?}", result.cost_trace);
        assert_eq!(result.cost_trace.len(), result.iterations + 1);
        assert_relative_eq!(result.cost_trace[0], initial_cost, max_relative = 1e-12);

        let final_cost = *result.cost_trace.last().unwrap();
        assert!(final_cost < 1e-20, "final cost {final_cost:e}");
        let err = (result.params.flatten() - truth.flatten()).norm() / truth.flatten().norm();
        assert!(err < 1e-8, "parameter error {err:e}");
    }

    #[test]
    fn covariance_of_a_constant_gain_is_sigma_squared_over_n() {
        // Scalar constant model: Φ̂ = 1, so the information matrix is
        // Σₖ 1/σ² = N/σ² and the predicted variance σ²/N. (The realified
        // least-squares estimator actually achieves σ²/2N — the prediction
        // is conservative by exactly the factor 2, which keeps it inside
        // the calibration band used downstream.)
        let n = 50;
        let sigma2 = 0.09;
        let grid = FrequencyGrid::log_spaced_hz(1.0, 5.0, n).unwrap();
        let responses = (0..n)
            .map(|_| DMatrix::from_element(1, 1, C64::new(3.0, 0.0)))
            .collect();
        let vars = (0..n).map(|_| DVector::from_element(1, sigma2)).collect();
        let data =
            FrfDataset::new(grid, responses, Some(NoiseCov::Diagonal(vars))).unwrap();
        let st = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![SubmodelOrders { den_order: 0, num_order: 0, integrators: 0 }],
        };
        let params = AdditiveParameters::new(
            st,
            vec![SubmodelParams {
                den: DVector::zeros(0),
                num: vec![DMatrix::from_element(1, 1, 3.0)],
            }],
        )
        .unwrap();
        let cov = covariance(&data, &params).unwrap();
        assert!(!cov.relative_only);
        assert_relative_eq!(cov.matrix[(0, 0)], sigma2 / n as f64, max_relative = 1e-10);

        // Covariance scales linearly with the noise covariance.
        let scaled = FrfDataset::new(
            data.grid.clone(),
            data.responses.clone(),
            Some(NoiseCov::Diagonal(
                (0..n).map(|_| DVector::from_element(1, 4.0 * sigma2)).collect(),
            )),
        )
        .unwrap();
        let cov4 = covariance(&scaled, &params).unwrap();
        assert_relative_eq!(cov4.matrix[(0, 0)], 4.0 * cov.matrix[(0, 0)], max_relative = 1e-10);
    }

    #[test]
    fn covariance_without_noise_information_is_relative_only() {
        let params = mixed_params(41, 2, 2);
        let grid = FrequencyGrid::log_spaced_hz(0.2, 15.0, 60).unwrap();
        let data = simulate(&params, &grid);
        let cov = covariance(&data, &params).unwrap();
        assert!(cov.relative_only);
        assert_eq!(cov.matrix.nrows(), params.structure.beta_len());
        // Symmetric and positive on the diagonal.
        assert!((&cov.matrix - cov.matrix.transpose()).norm() <= 1e-10 * cov.matrix.norm());
        assert!(cov.matrix.diagonal().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn unidentifiable_parameters_are_named_in_the_covariance_error() {
        // A resonance whose numerator is exactly zero contributes nothing to
        // the response, so its pole location carries no information: the
        // instrument's denominator rows vanish with vec(Pᵢ).
        let st = AdditiveStructure {
            n_outputs: 1,
            n_inputs: 1,
            submodels: vec![SubmodelOrders { den_order: 2, num_order: 0, integrators: 0 }],
        };
        let params = AdditiveParameters::new(
            st,
            vec![SubmodelParams {
                den: DVector::from_vec(vec![0.02, 0.01]),
                num: vec![DMatrix::from_element(1, 1, 0.0)],
            }],
        )
        .unwrap();
        let grid = FrequencyGrid::log_spaced_hz(1.0, 5.0, 20).unwrap();
        let responses = (0..20).map(|_| DMatrix::from_element(1, 1, C64::new(0.0, 0.0))).collect();
        let data = FrfDataset::new(grid, responses, None).unwrap();
        let err = covariance(&data, &params).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("singular") && msg.contains("denominator"),
            "{msg}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        /// Scaling the data scales the initialized numerators by the same
        /// factor (the fit is linear in the data).
        #[test]
        fn numerator_init_is_scale_equivariant(scale in 0.1f64..10.0, seed in 0u64..200) {
            let params = mixed_params(seed, 2, 2);
            let grid = FrequencyGrid::log_spaced_hz(0.2, 15.0, 60).unwrap();
            let data = simulate(&params, &grid);
            let dens: Vec<DVector<f64>> =
                params.submodels.iter().map(|s| s.den.clone()).collect();
            let weights = build_weighting(
                &data,
                &WeightingScheme { kind: WeightKind::Identity, magnitude_floor: None },
            ).unwrap();
            let base = init_numerators(&data, &params.structure, &dens, &weights).unwrap();
            let scaled_data = FrfDataset::new(
                data.grid.clone(),
                data.responses.iter().map(|g| g.map(|z| z * scale)).collect(),
                None,
            ).unwrap();
            let scaled = init_numerators(&scaled_data, &params.structure, &dens, &weights).unwrap();
            // Denominators are fixed inputs; every numerator scales with the data.
            for (i, (a, b)) in base.submodels.iter().zip(&scaled.submodels).enumerate() {
                prop_assert_eq!(&a.den, &b.den, "denominators moved in submodel {}", i);
                for (na, nb) in a.num.iter().zip(&b.num) {
                    let diff = (nb - na * scale).norm();
                    prop_assert!(diff <= 1e-9 * na.norm().max(1e-12) * scale.max(1.0),
                        "numerator scaling violated in submodel {}: {}", i, diff);
                }
            }
        }
    }
}
