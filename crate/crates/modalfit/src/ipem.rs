//! Stage-2 estimator: projection of an additive transfer-matrix estimate
//! onto the modal parametrization with rank-one residue matrices.
//!
//! The projection minimizes the parameter-space misfit
//! V(ρ) = (β̂ − f(ρ))ᵀ Σ̂⁻¹ (β̂ − f(ρ)) in *monic* coordinates (numerator and
//! denominator coefficients over monic denominators, where f is polynomial),
//! weighted by the stage-1 covariance transported into those coordinates.
//! Minimization is damped Gauss–Newton with a minimum-norm step — the modal
//! parametrization has exact gauge null directions (shape scaling/phase), so
//! the step is computed through a truncated SVD of the whitened Jacobian.
//!
//! The initial point comes from pattern-matching the additive structure and
//! taking the dominant singular triplet of each mode's residue matrix.

use nalgebra::{DMatrix, DVector};

use crate::additive::{AdditiveParameters, AdditiveStructure};
use crate::linalg;
use crate::modal::{
    DampingModel, FlexibleMode, ModalParameters, ModalStructure, RigidBodyMode,
};
use crate::riv::CovarianceEstimate;
use crate::{C64, Error, Result};

// ---------------------------------------------------------------------------
// Rank-one approximation
// ---------------------------------------------------------------------------

/// Best rank-one factorization of a complex matrix in the Frobenius norm:
/// returns (ψ_l, ψ_r) with M ≈ ψ_l ψ_rᵀ (plain transpose), ψ_l of unit norm,
/// together with all singular values in descending order.
pub fn rank_one_approx(m: &DMatrix<C64>) -> Result<(DVector<C64>, DVector<C64>, Vec<f64>)> {
    let svd = nalgebra::SVD::new(m.clone(), true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left vectors".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let top = order[0];
    let sigma = svd.singular_values[top];
    let psi_l = u.column(top).into_owned();
    // Row `top` of Vᴴ holds conj(v₁)ᵀ, so the plain transpose of that row is
    // exactly the right factor of σ·u₁v₁ᴴ.
    let psi_r = DVector::from_fn(vt.ncols(), |j, _| vt[(top, j)] * sigma);
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok((psi_l, psi_r, values))
}

/// Real counterpart of [`rank_one_approx`]: M ≈ φ_l φ_rᵀ with unit φ_l.
pub fn rank_one_approx_real(m: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>, Vec<f64>)> {
    let svd = nalgebra::SVD::new(m.clone(), true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left vectors".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let top = order[0];
    let psi_l = u.column(top).into_owned();
    let psi_r = DVector::from_fn(vt.ncols(), |j, _| vt[(top, j)] * svd.singular_values[top]);
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok((psi_l, psi_r, values))
}

// ---------------------------------------------------------------------------
// Structure classification
// ---------------------------------------------------------------------------

/// How each additive submodel maps into the modal picture.
struct ModalShapePlan {
    /// Index of the double-integrator (rigid-body) block, if any.
    rigid: Option<usize>,
    /// Indices of the second-order flexible blocks, in order.
    flex: Vec<usize>,
    /// Index of the constant block, if any.
    dc: Option<usize>,
    damping: DampingModel,
}

fn classify(structure: &AdditiveStructure) -> Result<ModalShapePlan> {
    let mut rigid = None;
    let mut flex = Vec::new();
    let mut dc = None;
    let mut damping: Option<DampingModel> = None;
    for (i, o) in structure.submodels.iter().enumerate() {
        match (o.den_order, o.num_order, o.integrators) {
            (0, 0, 2) => {
                if rigid.replace(i).is_some() {
                    return Err(Error::Config(
                        "two double-integrator blocks; the modal form has a single 1/s² term"
                            .into(),
                    ));
                }
            }
            (0, 0, 0) => {
                if dc.replace(i).is_some() {
                    return Err(Error::Config("two constant blocks in the structure".into()));
                }
            }
            (2, m @ (0 | 1), 0) => {
                let kind = if m == 1 {
                    DampingModel::General
                } else {
                    DampingModel::Proportional
                };
                match damping {
                    None => damping = Some(kind),
                    Some(d) if d == kind => {}
                    Some(_) => {
                        return Err(Error::Config(
                            "mixed flexible numerator orders; cannot infer one damping model"
                                .into(),
                        ));
                    }
                }
                flex.push(i);
            }
            _ => {
                return Err(Error::Config(format!(
                    "submodel {i} (den {}, num {}, integrators {}) has no modal counterpart",
                    o.den_order, o.num_order, o.integrators
                )));
            }
        }
    }
    if flex.is_empty() && rigid.is_none() {
        return Err(Error::Config(
            "structure has neither flexible nor rigid-body blocks".into(),
        ));
    }
    Ok(ModalShapePlan {
        rigid,
        flex,
        dc,
        // A purely rigid structure defaults to the proportional tag; it has
        // no flexible modes either way.
        damping: damping.unwrap_or(DampingModel::Proportional),
    })
}

/// Monic coefficients of flexible submodel `i`: (c₀, c₁, N blocks).
/// Requires a₂ > 0, i.e. an oscillatory denominator.
fn monic_block(params: &AdditiveParameters, i: usize) -> Result<(f64, f64, Vec<DMatrix<f64>>)> {
    let p = &params.submodels[i];
    let (a1, a2) = (p.den[0], p.den[1]);
    if !(a2 > 0.0) {
        return Err(Error::Model(format!(
            "submodel {i}: leading denominator coefficient {a2:e} is not positive, so the \
             block is not an oscillatory pair"
        )));
    }
    let c0 = 1.0 / a2;
    let c1 = a1 / a2;
    let nums = p.num.iter().map(|b| b.map(|x| x / a2)).collect();
    Ok((c0, c1, nums))
}

// ---------------------------------------------------------------------------
// Monic coordinates of the additive estimate
// ---------------------------------------------------------------------------

/// Express the additive parameters in the monic image coordinates used by
/// the projection (matching [`ModalParameters::modal_image`] block order:
/// rigid residue first, flexible blocks in submodel order, constant last).
pub fn beta_to_monic(params: &AdditiveParameters) -> Result<DVector<f64>> {
    let plan = classify(&params.structure)?;
    let mut out = Vec::new();
    if let Some(i) = plan.rigid {
        out.extend_from_slice(params.submodels[i].num[0].as_slice());
    }
    for &i in &plan.flex {
        let (c0, c1, nums) = monic_block(params, i)?;
        out.push(c0);
        out.push(c1);
        for n in &nums {
            out.extend_from_slice(n.as_slice());
        }
    }
    if let Some(i) = plan.dc {
        out.extend_from_slice(params.submodels[i].num[0].as_slice());
    }
    Ok(DVector::from_vec(out))
}

/// Jacobian T = ∂(monic coordinates)/∂βᵀ of [`beta_to_monic`], used to
/// transport the stage-1 covariance: Σ_monic = T Σ_β Tᵀ. Block diagonal up
/// to the ordering of the additive submodels.
pub fn monic_transform(params: &AdditiveParameters) -> Result<DMatrix<f64>> {
    let plan = classify(&params.structure)?;
    let st = &params.structure;
    let q = st.q();
    let image_len = beta_to_monic(params)?.len();
    let mut t = DMatrix::zeros(image_len, st.beta_len());
    let mut row = 0;
    if let Some(i) = plan.rigid {
        let off = st.theta_offset(i);
        for e in 0..q {
            t[(row + e, off + e)] = 1.0;
        }
        row += q;
    }
    for &i in &plan.flex {
        let off = st.theta_offset(i);
        let p = &params.submodels[i];
        let (a1, a2) = (p.den[0], p.den[1]);
        if !(a2 > 0.0) {
            return Err(Error::Model(format!(
                "submodel {i}: leading denominator coefficient {a2:e} is not positive"
            )));
        }
        let inv = 1.0 / a2;
        let inv2 = inv * inv;
        // c₀ = 1/a₂, c₁ = a₁/a₂, Nⱼ = Bⱼ/a₂; β block order is [a₁, a₂, vecB…].
        t[(row, off + 1)] = -inv2;
        t[(row + 1, off)] = inv;
        t[(row + 1, off + 1)] = -a1 * inv2;
        row += 2;
        for (j, b) in p.num.iter().enumerate() {
            let col0 = off + 2 + j * q;
            for e in 0..q {
                t[(row + e, col0 + e)] = inv;
                t[(row + e, off + 1)] = -b.as_slice()[e] * inv2;
            }
            row += q;
        }
    }
    if let Some(i) = plan.dc {
        let off = st.theta_offset(i);
        for e in 0..q {
            t[(row + e, off + e)] = 1.0;
        }
        row += q;
    }
    debug_assert_eq!(row, image_len);
    Ok(t)
}

// ---------------------------------------------------------------------------
// SVD initialization
// ---------------------------------------------------------------------------

/// Rank structure of one flexible mode's residue matrix at initialization.
#[derive(Debug, Clone)]
pub struct ModeRankDiagnostic {
    pub mode_index: usize,
    /// All singular values of the residue estimate, descending.
    pub singular_values: Vec<f64>,
    /// Relative Frobenius mass discarded by the rank-one truncation.
    pub discarded_mass: f64,
}

#[derive(Debug, Clone)]
pub struct SvdInit {
    pub params: ModalParameters,
    /// Human-readable observations (rank deficits etc.).
    pub notes: Vec<String>,
    pub diagnostics: Vec<ModeRankDiagnostic>,
}

/// Build the initial modal parameters from an additive estimate by rank-one
/// truncation of each mode's residue matrix. The rigid-body residue sum is
/// split into `n_rigid` shape pairs through its leading singular triplets.
pub fn svd_init(params: &AdditiveParameters, n_rigid: usize) -> Result<SvdInit> {
    let plan = classify(&params.structure)?;
    let st = &params.structure;
    let (ny, nu) = (st.n_outputs, st.n_inputs);
    let mut notes = Vec::new();
    let mut diagnostics = Vec::new();

    match (plan.rigid, n_rigid) {
        (None, 0) => {}
        (Some(_), 0) => {
            return Err(Error::Config(
                "structure has a double-integrator block but n_rigid = 0".into(),
            ));
        }
        (None, _) => {
            return Err(Error::Config(
                "n_rigid > 0 but the structure has no double-integrator block".into(),
            ));
        }
        (Some(_), r) if r > ny.min(nu) => {
            return Err(Error::Config(format!(
                "cannot split a {ny}×{nu} rigid-body residue into {r} rank-one modes"
            )));
        }
        _ => {}
    }

    let mut rigid = Vec::with_capacity(n_rigid);
    if let Some(i) = plan.rigid {
        let residue_sum = &params.submodels[i].num[0];
        let svd = nalgebra::SVD::new(residue_sum.clone(), true, true);
        let u = svd.u.ok_or_else(|| Error::Numerical("SVD u missing".into()))?;
        let vt = svd.v_t.ok_or_else(|| Error::Numerical("SVD vt missing".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
        });
        let smax = svd.singular_values[order[0]].max(f64::MIN_POSITIVE);
        let effective = order
            .iter()
            .filter(|&&j| svd.singular_values[j] > 1e-12 * smax)
            .count();
        if effective < n_rigid {
            notes.push(format!(
                "rigid-body residue has effective rank {effective} but {n_rigid} modes were \
                 requested; trailing shapes start near zero"
            ));
        }
        for r in 0..n_rigid {
            let j = order[r];
            rigid.push(RigidBodyMode {
                phi_left: u.column(j).into_owned(),
                phi_right: DVector::from_fn(nu, |c, _| vt[(j, c)] * svd.singular_values[j]),
            });
        }
    }

    let mut flexible = Vec::with_capacity(plan.flex.len());
    for (mode_index, &i) in plan.flex.iter().enumerate() {
        let (c0, c1, nums) = monic_block(params, i)?;
        let disc = c0 - 0.25 * c1 * c1;
        if !(disc > 0.0) {
            return Err(Error::Model(format!(
                "submodel {i}: denominator roots are real (discriminant {disc:e}); the block \
                 cannot seed an underdamped mode"
            )));
        }
        match plan.damping {
            DampingModel::General => {
                let lambda = C64::new(-0.5 * c1, disc.sqrt());
                // Residue at λ of (N₁s + N₀)/((s−λ)(s−λ̄)).
                let n0 = &nums[0];
                let n1 = &nums[1];
                let denom = lambda - lambda.conj();
                let l_hat = DMatrix::from_fn(ny, nu, |r, c| {
                    (C64::new(n0[(r, c)], 0.0) + lambda * n1[(r, c)]) / denom
                });
                let (psi_l, psi_r, sv) = rank_one_approx(&l_hat)?;
                let total: f64 = sv.iter().map(|s| s * s).sum();
                diagnostics.push(ModeRankDiagnostic {
                    mode_index,
                    discarded_mass: if total > 0.0 {
                        (sv.iter().skip(1).map(|s| s * s).sum::<f64>() / total).sqrt()
                    } else {
                        0.0
                    },
                    singular_values: sv,
                });
                flexible.push(FlexibleMode::General {
                    lambda,
                    psi_left: psi_l,
                    psi_right: psi_r,
                });
            }
            DampingModel::Proportional => {
                let omega = c0.sqrt();
                let zeta = c1 / (2.0 * omega);
                if !(zeta > 0.0 && zeta < 1.0) {
                    return Err(Error::Model(format!(
                        "submodel {i}: implied damping ratio {zeta:e} outside (0, 1)"
                    )));
                }
                let (phi_l, phi_r, sv) = rank_one_approx_real(&nums[0])?;
                let total: f64 = sv.iter().map(|s| s * s).sum();
                diagnostics.push(ModeRankDiagnostic {
                    mode_index,
                    discarded_mass: if total > 0.0 {
                        (sv.iter().skip(1).map(|s| s * s).sum::<f64>() / total).sqrt()
                    } else {
                        0.0
                    },
                    singular_values: sv,
                });
                flexible.push(FlexibleMode::Proportional {
                    omega,
                    zeta,
                    phi_left: phi_l,
                    phi_right: phi_r,
                });
            }
        }
    }

    let dc_gain = plan.dc.map(|i| params.submodels[i].num[0].clone());
    let modal = ModalParameters {
        n_outputs: ny,
        n_inputs: nu,
        damping: plan.damping,
        rigid,
        flexible,
        dc_gain,
    };
    let modal = modal.normalize_gauge()?;
    modal.validate()?;
    Ok(SvdInit {
        params: modal,
        notes,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Gauss–Newton projection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GnOptions {
    pub max_iterations: usize,
    /// Relative step-size threshold for convergence.
    pub relative_tolerance: f64,
    /// Singular values of the whitened Jacobian below this fraction of the
    /// largest are truncated (gauge directions).
    pub rank_threshold: f64,
}

impl Default for GnOptions {
    fn default() -> Self {
        GnOptions {
            max_iterations: 40,
            relative_tolerance: 1e-9,
            rank_threshold: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnStatus {
    Converged,
    BudgetExhausted,
    /// No step length achieved a decrease; the current iterate is returned.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct GnTraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub step_size: f64,
    pub param_rel_change: f64,
}

#[derive(Debug, Clone)]
pub struct GnResult {
    pub params: ModalParameters,
    /// Objective of the returned (gauge-normalized) parameters.
    pub objective: f64,
    pub trace: Vec<GnTraceRow>,
    pub status: GnStatus,
    /// True when no covariance was available and the misfit was measured
    /// with the identity weight.
    pub identity_weighted: bool,
}

/// Image-row/parameter-column block pairs of the modal-image Jacobian, used
/// to exploit its block-diagonal sparsity in the whitened product.
fn jacobian_blocks(st: &ModalStructure) -> Vec<((usize, usize), (usize, usize))> {
    let q = st.q();
    let (ny, nu) = (st.n_outputs, st.n_inputs);
    let mut blocks = Vec::new();
    let mut row = 0;
    let mut col = 0;
    if st.n_rigid > 0 {
        blocks.push(((row, q), (col, st.n_rigid * (ny + nu))));
        row += q;
        col += st.n_rigid * (ny + nu);
    }
    let (img_h, rho_w) = match st.damping {
        DampingModel::General => (2 + 2 * q, 2 + 2 * (ny + nu)),
        DampingModel::Proportional => (2 + q, 2 + ny + nu),
    };
    for _ in 0..st.n_flexible {
        blocks.push(((row, img_h), (col, rho_w)));
        row += img_h;
        col += rho_w;
    }
    if st.has_dc {
        blocks.push(((row, q), (col, q)));
    }
    blocks
}

/// Minimize ‖U (target − f(ρ))‖² by damped Gauss–Newton, starting from
/// `init`. `whitener` is the upper-triangular factor with Σ⁻¹ = UᵀU (the
/// identity when no covariance is available).
pub fn gauss_newton(
    target: &DVector<f64>,
    whitener: &DMatrix<f64>,
    init: &ModalParameters,
    options: &GnOptions,
    identity_weighted: bool,
) -> Result<GnResult> {
    let st = init.structure();
    let dim_img = st.image_len();
    if target.len() != dim_img {
        return Err(Error::Config(format!(
            "target vector has length {}, the modal image needs {dim_img}",
            target.len()
        )));
    }
    if whitener.shape() != (dim_img, dim_img) {
        return Err(Error::Config("whitener shape mismatch".into()));
    }
    if options.max_iterations == 0 {
        return Err(Error::Config("iteration budget must be at least 1".into()));
    }

    let blocks = jacobian_blocks(&st);
    let objective = |p: &ModalParameters| -> (DVector<f64>, f64) {
        let r = whitener * (target - p.modal_image());
        let v = r.norm_squared();
        (r, v)
    };

    let mut params = init.normalize_gauge()?;
    params.validate()?;
    let (mut residual, mut value) = objective(&params);
    let mut trace = vec![GnTraceRow {
        iteration: 0,
        objective: value,
        step_size: 0.0,
        param_rel_change: 0.0,
    }];
    let mut status = GnStatus::BudgetExhausted;

    for iteration in 1..=options.max_iterations {
        if value == 0.0 {
            status = GnStatus::Converged;
            break;
        }
        let rho = params.to_rho();
        let jac = params.jacobian_modal_image();
        // A = U·J block by block; the column ranges are disjoint.
        let mut a = DMatrix::zeros(dim_img, st.rho_len());
        for &((r0, rh), (c0, cw)) in &blocks {
            let mut dst = a.view_mut((0, c0), (dim_img, cw));
            dst.gemm(
                1.0,
                &whitener.view((0, r0), (dim_img, rh)),
                &jac.view((r0, c0), (rh, cw)),
                0.0,
            );
        }
        let svd = linalg::svd_thin(&a)?;
        let smax = svd.s.max();
        // Minimum-norm solve of A·Δ ≈ residual with gauge directions cut.
        let utr = svd.u.transpose() * &residual;
        let mut y = DVector::zeros(svd.s.len());
        for j in 0..svd.s.len() {
            if svd.s[j] > options.rank_threshold * smax {
                y[j] = utr[j] / svd.s[j];
            }
        }
        let delta = svd.vt.transpose() * y;

        let rho_norm = rho.norm().max(f64::MIN_POSITIVE);
        if delta.norm() <= options.relative_tolerance * rho_norm {
            status = GnStatus::Converged;
            break;
        }

        // Backtracking on simple decrease.
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=20 {
            let cand_rho = &rho + &delta * alpha;
            let cand = ModalParameters::from_rho(&st, &cand_rho)?;
            let (cand_res, cand_val) = objective(&cand);
            if cand_val < value {
                accepted = Some((cand, cand_res, cand_val, alpha));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, cand_res, cand_val, alpha)) = accepted else {
            status = GnStatus::Stalled;
            break;
        };

        // Re-pin the gauge. The image is gauge-invariant, so this only moves
        // the objective at rounding level; in the rare case rounding pushes
        // it above the accepted value, keep the raw iterate to preserve the
        // monotone trace.
        let (next_params, next_res, next_val) = match cand.normalize_gauge() {
            Ok(g) => {
                let (gr, gv) = objective(&g);
                if gv <= cand_val {
                    (g, gr, gv)
                } else {
                    (cand, cand_res, cand_val)
                }
            }
            Err(_) => (cand, cand_res, cand_val),
        };

        let rel_change = alpha * delta.norm() / rho_norm;
        params = next_params;
        residual = next_res;
        value = next_val;
        trace.push(GnTraceRow {
            iteration,
            objective: value,
            step_size: alpha,
            param_rel_change: rel_change,
        });
        if rel_change < options.relative_tolerance {
            status = GnStatus::Converged;
            break;
        }
    }

    let final_params = params.normalize_gauge()?;
    final_params.validate()?;
    let (_, final_value) = objective(&final_params);
    Ok(GnResult {
        params: final_params,
        objective: final_value,
        trace,
        status,
        identity_weighted,
    })
}

// ---------------------------------------------------------------------------
// End-to-end projection driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProjectOutcome {
    pub init: SvdInit,
    pub gn: GnResult,
    /// Observations from covariance conditioning.
    pub notes: Vec<String>,
}

/// Invert the monic covariance, escalating a diagonal ridge when the plain
/// Cholesky factorization fails.
fn invert_covariance(sigma: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<String>)> {
    if let Ok(inv) = linalg::invert_spd(sigma) {
        return Ok((inv, None));
    }
    let n = sigma.nrows();
    let base = sigma.trace() / n as f64;
    for rel in [1e-12, 1e-10, 1e-8, 1e-6] {
        let ridge = base * rel;
        let mut shifted = sigma.clone();
        for i in 0..n {
            shifted[(i, i)] += ridge;
        }
        if let Ok(inv) = linalg::invert_spd(&shifted) {
            return Ok((
                inv,
                Some(format!(
                    "covariance needed a diagonal ridge of {ridge:.3e} before inversion"
                )),
            ));
        }
    }
    Err(Error::Numerical(
        "transported covariance could not be inverted even with a ridge of 1e-6·mean(diag)"
            .into(),
    ))
}

/// Full stage-2 projection: SVD initialization, covariance transport into
/// monic coordinates, and the weighted Gauss–Newton refinement.
pub fn project(
    additive: &AdditiveParameters,
    beta_cov: Option<&CovarianceEstimate>,
    n_rigid: usize,
    options: &GnOptions,
) -> Result<ProjectOutcome> {
    let init = svd_init(additive, n_rigid)?;
    let target = beta_to_monic(additive)?;
    let dim = target.len();
    let mut notes = Vec::new();

    let (whitener, identity_weighted) = match beta_cov {
        Some(cov) => {
            let t = monic_transform(additive)?;
            let sigma = &t * &cov.matrix * t.transpose();
            let sigma = (&sigma + sigma.transpose()) * 0.5;
            let (inv, note) = invert_covariance(&sigma)?;
            if let Some(n) = note {
                notes.push(n);
            }
            if cov.relative_only {
                notes.push(
                    "stage-1 covariance was relative-only; projection weights share that scale"
                        .to_string(),
                );
            }
            let inv = (&inv + inv.transpose()) * 0.5;
            let l = linalg::cholesky_lower(&inv)?;
            (l.transpose(), false)
        }
        None => (DMatrix::identity(dim, dim), true),
    };

    let gn = gauss_newton(&target, &whitener, &init.params, options, identity_weighted)?;
    Ok(ProjectOutcome { init, gn, notes })
}
