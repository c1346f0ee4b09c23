//! Synthetic test systems: conversion of second-order mechanical models
//! (M q̈ + D q̇ + K q = F u, y = Q q) to modal form, random model
//! generation, and frequency-response simulation with calibrated noise.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::frf::{FrequencyGrid, FrfDataset, NoiseCov};
use crate::linalg;
use crate::modal::{DampingModel, FlexibleMode, ModalParameters, RigidBodyMode};
use crate::{C64, Error, Result};

/// Largest mechanical model accepted by [`mech_to_modal`]. The conversion
/// uses dense eigendecompositions; beyond this size a dedicated sparse tool
/// is the right instrument.
pub const MAX_MECH_DOF: usize = 100;

/// Relative threshold below which a stiffness eigenvalue counts as zero
/// (a rigid-body direction).
const RIGID_EIG_REL_TOL: f64 = 1e-8;

/// A linear mechanical system M q̈ + D q̇ + K q = F u, y = Q q.
#[derive(Debug, Clone)]
pub struct MechanicalSystem {
    pub mass: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// Input map, n_dof × n_inputs.
    pub input: DMatrix<f64>,
    /// Output map, n_outputs × n_dof.
    pub output: DMatrix<f64>,
}

impl MechanicalSystem {
    pub fn n_dof(&self) -> usize {
        self.mass.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_dof();
        if n == 0 {
            return Err(Error::Model("mechanical system with zero degrees of freedom".into()));
        }
        if n > MAX_MECH_DOF {
            return Err(Error::Model(format!(
                "mechanical system has {n} degrees of freedom; the dense modal conversion \
                 is limited to {MAX_MECH_DOF}"
            )));
        }
        for (name, m) in [("mass", &self.mass), ("damping", &self.damping), ("stiffness", &self.stiffness)] {
            if m.shape() != (n, n) {
                return Err(Error::Model(format!("{name} matrix is not {n}×{n}")));
            }
            let asym = (m - m.transpose()).norm();
            if asym > 1e-10 * m.norm().max(1.0) {
                return Err(Error::Model(format!("{name} matrix is not symmetric")));
            }
        }
        if self.input.nrows() != n || self.input.ncols() == 0 {
            return Err(Error::Model("input map must be n_dof × n_inputs".into()));
        }
        if self.output.ncols() != n || self.output.nrows() == 0 {
            return Err(Error::Model("output map must be n_outputs × n_dof".into()));
        }
        Ok(())
    }

    /// Direct frequency response Q (M s² + D s + K)⁻¹ F — the oracle the
    /// modal conversion is tested against.
    pub fn eval_direct(&self, s: C64) -> Result<DMatrix<C64>> {
        let n = self.n_dof();
        let s2 = s * s;
        let mut a = DMatrix::<C64>::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                a[(r, c)] = s2 * self.mass[(r, c)]
                    + s * self.damping[(r, c)]
                    + C64::new(self.stiffness[(r, c)], 0.0);
            }
        }
        let f = self.input.map(|x| C64::new(x, 0.0));
        let lu = a.lu();
        let x = lu
            .solve(&f)
            .ok_or_else(|| Error::Numerical("mechanical pencil is singular at this frequency".into()))?;
        let q = self.output.map(|x| C64::new(x, 0.0));
        Ok(q * x)
    }
}

/// Inverse symmetric square root of a small SPD matrix.
fn inv_sqrt_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (w, v) = linalg::sym_eig(a)?;
    let wmax = w.amax();
    if w.iter().any(|&x| x <= 1e-12 * wmax.max(f64::MIN_POSITIVE)) {
        return Err(Error::Numerical(format!("{what} is numerically singular")));
    }
    let d = DMatrix::from_diagonal(&w.map(|x| 1.0 / x.sqrt()));
    Ok(&v * d * v.transpose())
}

/// Convert a mechanical model to modal parameters.
///
/// Rigid-body directions (the stiffness nullspace) are handled analytically:
/// they must be undamped (D·N = 0), are mass-normalized, and become the
/// 1/s² modes. The flexible dynamics are reduced to the M-orthogonal
/// complement and solved there — under `General` damping through the
/// first-order descriptor pencil with residue normalization ṽᵀẼṽ = 1, under
/// `Proportional` damping through the symmetric eigenproblem of the
/// mass-whitened stiffness with Rayleigh damping ratios.
pub fn mech_to_modal(sys: &MechanicalSystem, damping: DampingModel) -> Result<ModalParameters> {
    sys.validate()?;
    let n = sys.n_dof();
    let np = sys.output.nrows();
    let ni = sys.input.ncols();

    // Rigid-body subspace from the stiffness eigendecomposition.
    let (kw, kv) = linalg::sym_eig(&sys.stiffness)?;
    let kmax = kw.amax();
    if kw.min() < -RIGID_EIG_REL_TOL * kmax.max(1.0) {
        return Err(Error::Model("stiffness matrix is indefinite".into()));
    }
    let n_rigid = kw.iter().filter(|&&x| x < RIGID_EIG_REL_TOL * kmax).count();
    if kmax <= 0.0 {
        return Err(Error::Model("stiffness matrix is zero; no flexible dynamics".into()));
    }

    let nullspace = kv.columns(0, n_rigid).into_owned();
    let complement = kv.columns(n_rigid, n - n_rigid).into_owned();

    // Rigid directions must not be damped, otherwise 1/s² modes are wrong.
    if n_rigid > 0 {
        let dn = &sys.damping * &nullspace;
        if dn.norm() > 1e-8 * sys.damping.norm().max(1.0) {
            return Err(Error::Model(
                "damping couples rigid-body motion; rigid modes would not be pure 1/s²".into(),
            ));
        }
    }

    // Mass-normalize: Ñᵀ M Ñ = I.
    let mut rigid = Vec::with_capacity(n_rigid);
    let n_tilde = if n_rigid > 0 {
        let gram = nullspace.transpose() * &sys.mass * &nullspace;
        let n_tilde = &nullspace * inv_sqrt_spd(&gram, "rigid-body mass Gram matrix")?;
        for i in 0..n_rigid {
            let col = n_tilde.column(i);
            rigid.push(RigidBodyMode {
                phi_left: &sys.output * col,
                phi_right: sys.input.transpose() * col,
            });
        }
        Some(n_tilde)
    } else {
        None
    };

    // M-orthogonal deflation of the complement: Ñᵀ M Z = 0, so the rigid and
    // flexible dynamics decouple exactly.
    let z = match &n_tilde {
        Some(nt) => &complement - nt * (nt.transpose() * &sys.mass * &complement),
        None => complement,
    };
    let m_red = z.transpose() * &sys.mass * &z;
    let d_red = z.transpose() * &sys.damping * &z;
    let k_red = z.transpose() * &sys.stiffness * &z;
    let m = n - n_rigid;

    let mut flexible: Vec<FlexibleMode> = Vec::with_capacity(m);
    match damping {
        DampingModel::General => {
            // First-order descriptor pencil on [ξ; ξ̇]:
            //   E = [D M; M 0],  A = [−K 0; 0 M],  A v = λ E v.
            let mut e_big = DMatrix::zeros(2 * m, 2 * m);
            let mut a_big = DMatrix::zeros(2 * m, 2 * m);
            e_big.view_mut((0, 0), (m, m)).copy_from(&d_red);
            e_big.view_mut((0, m), (m, m)).copy_from(&m_red);
            e_big.view_mut((m, 0), (m, m)).copy_from(&m_red);
            a_big.view_mut((0, 0), (m, m)).copy_from(&(-&k_red));
            a_big.view_mut((m, m), (m, m)).copy_from(&m_red);
            let pencil = linalg::solve_square(e_big, a_big)?;
            let (eigs, vecs) = linalg::eig(&pencil)?;

            let scale = eigs.iter().map(|l| l.norm()).fold(0.0, f64::max);
            let mut kept = Vec::new();
            for (j, l) in eigs.iter().enumerate() {
                if l.im.abs() <= 1e-10 * scale {
                    return Err(Error::Model(format!(
                        "flexible eigenvalue {:.6e}{:+.6e}j is (numerically) real: the system \
                         has an overdamped or undamped mode outside the modal model class",
                        l.re, l.im
                    )));
                }
                if l.im > 0.0 {
                    kept.push((j, *l));
                }
            }
            if kept.len() != m {
                return Err(Error::Model(format!(
                    "expected {m} underdamped mode pairs, found {}",
                    kept.len()
                )));
            }
            kept.sort_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap());

            for (j, lambda) in kept {
                if lambda.re >= 0.0 {
                    return Err(Error::Model(format!(
                        "unstable flexible eigenvalue {:.6e}{:+.6e}j",
                        lambda.re, lambda.im
                    )));
                }
                let u = vecs.view((0, j), (m, 1)).into_owned();
                // Normalization ṽᵀ E ṽ = 1 with ṽ = [ũ; λũ]:
                //   s = ũᵀDũ + 2λ ũᵀMũ  (plain transpose, not conjugated).
                let du = d_red.map(|x| C64::new(x, 0.0)) * &u;
                let mu = m_red.map(|x| C64::new(x, 0.0)) * &u;
                let s = u.transpose() * du + (u.transpose() * mu).map(|x| x * 2.0 * lambda);
                let s = s[(0, 0)];
                let mag = u.norm_squared() * (d_red.norm() + 2.0 * lambda.norm() * m_red.norm());
                if s.norm() <= 1e-12 * mag.max(f64::MIN_POSITIVE) {
                    return Err(Error::Numerical(format!(
                        "defective mode pair at eigenvalue {:.6e}{:+.6e}j: the descriptor \
                         normalization vanishes",
                        lambda.re, lambda.im
                    )));
                }
                // The branch of √s cancels in ψ_l ψ_rᵀ.
                let root = s.sqrt();
                let u_full = z.map(|x| C64::new(x, 0.0)) * (u / root);
                let psi_left = sys.output.map(|x| C64::new(x, 0.0)) * &u_full;
                let psi_right = sys.input.transpose().map(|x| C64::new(x, 0.0)) * &u_full;
                flexible.push(FlexibleMode::General {
                    lambda,
                    psi_left: DVector::from_column_slice(psi_left.as_slice()),
                    psi_right: DVector::from_column_slice(psi_right.as_slice()),
                });
            }
        }
        DampingModel::Proportional => {
            // Whiten by the mass Cholesky factor and diagonalize stiffness.
            let l = linalg::cholesky_lower(&m_red)
                .map_err(|_| Error::Model("reduced mass matrix is not positive definite".into()))?;
            let x = linalg::solve_square(l.clone(), k_red.clone())?;
            let w_mat = linalg::solve_square(l.clone(), x.transpose())?.transpose();
            let w_sym = (&w_mat + w_mat.transpose()) * 0.5;
            let (w2, y) = linalg::sym_eig(&w_sym)?;
            let w2max = w2.amax();
            for i in 0..m {
                if w2[i] <= RIGID_EIG_REL_TOL * w2max {
                    return Err(Error::Model(
                        "reduced stiffness still has a near-zero eigenvalue after rigid-body \
                         deflation"
                            .into(),
                    ));
                }
                let omega = w2[i].sqrt();
                // φ = L⁻ᵀ y, mass-normalized by construction.
                let yi = DMatrix::from_column_slice(m, 1, y.column(i).into_owned().as_slice());
                let phi = linalg::solve_square(l.transpose(), yi)?;
                let phi = DVector::from_column_slice(phi.as_slice());
                let zeta = (phi.transpose() * &d_red * &phi)[(0, 0)] / (2.0 * omega);
                if !(zeta > 0.0 && zeta < 1.0) {
                    return Err(Error::Model(format!(
                        "Rayleigh damping ratio {zeta:.6e} at ω = {omega:.6e} rad/s is outside \
                         (0, 1); the mode is undamped, overdamped, or unstable"
                    )));
                }
                let phi_full = &z * &phi;
                flexible.push(FlexibleMode::Proportional {
                    omega,
                    zeta,
                    phi_left: &sys.output * &phi_full,
                    phi_right: sys.input.transpose() * &phi_full,
                });
            }
            flexible.sort_by(|a, b| match (a, b) {
                (
                    FlexibleMode::Proportional { omega: wa, .. },
                    FlexibleMode::Proportional { omega: wb, .. },
                ) => wa.partial_cmp(wb).unwrap(),
                _ => unreachable!(),
            });
        }
    }

    let params = ModalParameters {
        n_outputs: np,
        n_inputs: ni,
        damping,
        rigid,
        flexible,
        dc_gain: None,
    };
    params.validate()?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Random model generation
// ---------------------------------------------------------------------------

/// Recipe for a random modal model with well-separated resonances.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub damping: DampingModel,
    pub n_rigid: usize,
    pub n_flexible: usize,
    /// Natural-frequency band in Hz (inclusive of placement, not of the
    /// enforced separation margin).
    pub freq_range_hz: (f64, f64),
    pub zeta_range: (f64, f64),
}

/// Minimum ratio between consecutive random natural frequencies.
const MIN_FREQ_RATIO: f64 = 1.05;

/// Draw a random modal model. Natural frequencies are placed log-uniformly
/// in the band with a guaranteed ratio of at least [`MIN_FREQ_RATIO`]
/// between neighbours (one-shot construction, no rejection loop); damping
/// ratios are uniform in the given range; mode shapes are isotropic unit
/// vectors. The result is gauge-normalized and carries no constant term.
pub fn random_modal_system(spec: &SynthSpec, seed: u64) -> Result<ModalParameters> {
    let (f_lo, f_hi) = spec.freq_range_hz;
    if !(f_lo > 0.0 && f_hi > f_lo) {
        return Err(Error::Config(format!(
            "frequency band ({f_lo}, {f_hi}) Hz must satisfy 0 < lo < hi"
        )));
    }
    let (z_lo, z_hi) = spec.zeta_range;
    if !(z_lo > 0.0 && z_lo <= z_hi && z_hi < 1.0) {
        return Err(Error::Config(format!(
            "damping-ratio range ({z_lo}, {z_hi}) must lie strictly inside (0, 1)"
        )));
    }
    if spec.n_flexible == 0 && spec.n_rigid == 0 {
        return Err(Error::Config("model needs at least one mode".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nf = spec.n_flexible;
    let delta = MIN_FREQ_RATIO.ln();
    let span = (f_hi / f_lo).ln();
    let free_span = span - delta * (nf.saturating_sub(1) as f64);
    if nf >= 2 && free_span < 0.0 {
        return Err(Error::Config(format!(
            "cannot place {nf} modes with pairwise frequency ratio ≥ {MIN_FREQ_RATIO} \
             inside [{f_lo}, {f_hi}] Hz"
        )));
    }

    let mut x: Vec<f64> = (0..nf).map(|_| rng.random::<f64>()).collect();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let freqs: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| f_lo * (xi * free_span.max(0.0) + delta * i as f64).exp())
        .collect();

    let unit_real = |rng: &mut ChaCha12Rng, n: usize| -> DVector<f64> {
        loop {
            let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = v.norm();
            if norm > 1e-8 {
                return v / norm;
            }
        }
    };
    let unit_complex = |rng: &mut ChaCha12Rng, n: usize| -> DVector<C64> {
        loop {
            let v = DVector::from_fn(n, |_, _| {
                C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            });
            let norm = v.norm();
            if norm > 1e-8 {
                return v.map(|z| z / norm);
            }
        }
    };

    let rigid = (0..spec.n_rigid)
        .map(|_| RigidBodyMode {
            phi_left: unit_real(&mut rng, spec.n_outputs),
            phi_right: unit_real(&mut rng, spec.n_inputs),
        })
        .collect();
    let flexible = freqs
        .iter()
        .map(|&f| {
            let omega = crate::frf::TWO_PI * f;
            let zeta = z_lo + (z_hi - z_lo) * rng.random::<f64>();
            match spec.damping {
                DampingModel::General => FlexibleMode::General {
                    lambda: crate::modal::eigenvalue_from(omega, zeta).expect("validated range"),
                    psi_left: unit_complex(&mut rng, spec.n_outputs),
                    psi_right: unit_complex(&mut rng, spec.n_inputs),
                },
                DampingModel::Proportional => FlexibleMode::Proportional {
                    omega,
                    zeta,
                    phi_left: unit_real(&mut rng, spec.n_outputs),
                    phi_right: unit_real(&mut rng, spec.n_inputs),
                },
            }
        })
        .collect();

    let params = ModalParameters {
        n_outputs: spec.n_outputs,
        n_inputs: spec.n_inputs,
        damping: spec.damping,
        rigid,
        flexible,
        dc_gain: None,
    };
    let params = params.normalize_gauge()?;
    params.validate()?;
    Ok(params)
}

/// Recipe for a random mechanical system (used to exercise
/// [`mech_to_modal`] against the direct-inversion oracle).
#[derive(Debug, Clone)]
pub struct RandomMechSpec {
    pub n_dof: usize,
    pub n_rigid: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub damping: DampingModel,
}

/// Draw a random mechanical system whose modal conversion is well posed:
/// M is SPD, K is PSD with an exact rank-`n_rigid` nullspace, and D is
/// built so rigid motion stays undamped (stiffness-proportional plus, under
/// general damping, a term supported on the mass-orthogonal complement of
/// the nullspace). Damping scales are halved deterministically until every
/// flexible mode is strictly underdamped.
pub fn random_mechanical_system(spec: &RandomMechSpec, seed: u64) -> Result<(MechanicalSystem, ModalParameters)> {
    let n = spec.n_dof;
    if spec.n_rigid >= n {
        return Err(Error::Config(format!(
            "need n_rigid < n_dof, got {} ≥ {n}",
            spec.n_rigid
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gauss_mat = |rng: &mut ChaCha12Rng, r: usize, c: usize| {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    let a = gauss_mat(&mut rng, n, n);
    let mass = &a * a.transpose() + DMatrix::identity(n, n) * n as f64;
    let b = gauss_mat(&mut rng, n, n - spec.n_rigid);
    let stiffness = &b * b.transpose() * 50.0;
    let input = gauss_mat(&mut rng, n, spec.n_inputs);
    let output = gauss_mat(&mut rng, spec.n_outputs, n);
    let s_raw = gauss_mat(&mut rng, n, n);

    // Projector that annihilates the stiffness nullspace on the right, so
    // the extra (non-proportional) damping term cannot couple rigid motion.
    let proj = if spec.n_rigid > 0 {
        let (kw, kv) = linalg::sym_eig(&stiffness)?;
        let kmax = kw.amax();
        let r = kw.iter().filter(|&&x| x < RIGID_EIG_REL_TOL * kmax).count();
        if r != spec.n_rigid {
            return Err(Error::Numerical(format!(
                "random stiffness has nullspace dimension {r}, wanted {}",
                spec.n_rigid
            )));
        }
        let nullspace = kv.columns(0, r).into_owned();
        let gram = nullspace.transpose() * &mass * &nullspace;
        let n_tilde = &nullspace * inv_sqrt_spd(&gram, "rigid-body mass Gram matrix")?;
        DMatrix::identity(n, n) - &n_tilde * (n_tilde.transpose() * &mass)
    } else {
        DMatrix::identity(n, n)
    };

    let mut beta = 2e-3;
    // Mass-proportional damping is only rigid-safe when there is no
    // nullspace at all.
    let alpha = if spec.n_rigid == 0 { 0.05 } else { 0.0 };
    let mut eps = 1e-3;
    for _ in 0..60 {
        let damping = match spec.damping {
            DampingModel::Proportional => &stiffness * beta + &mass * alpha,
            DampingModel::General => {
                let extra = proj.transpose() * (&s_raw * s_raw.transpose() * eps) * &proj;
                &stiffness * beta + &mass * alpha + extra
            }
        };
        let sys = MechanicalSystem {
            mass: mass.clone(),
            damping,
            stiffness: stiffness.clone(),
            input: input.clone(),
            output: output.clone(),
        };
        match mech_to_modal(&sys, spec.damping) {
            Ok(modal) => return Ok((sys, modal)),
            Err(_) => {
                beta *= 0.5;
                eps *= 0.5;
            }
        }
    }
    Err(Error::Numerical(
        "could not reach an underdamped random mechanical system after 60 damping reductions"
            .into(),
    ))
}

// ---------------------------------------------------------------------------
// FRF simulation
// ---------------------------------------------------------------------------

/// Evaluate a modal model on a frequency grid and add circular complex
/// Gaussian noise with per-entry standard deviation `noise_level · |G_e|`
/// (real and imaginary parts each get variance (γ|G_e|)²/2). The returned
/// dataset carries the exact diagonal noise covariance (from the noiseless
/// magnitudes); with `noise_level = 0` it is noise- and covariance-free.
pub fn simulate_frf(
    params: &ModalParameters,
    grid: &FrequencyGrid,
    noise_level: f64,
    seed: u64,
) -> Result<FrfDataset> {
    if noise_level < 0.0 || !noise_level.is_finite() {
        return Err(Error::Config(format!("noise level {noise_level} must be ≥ 0")));
    }
    let q = params.n_outputs * params.n_inputs;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut responses = Vec::with_capacity(grid.len());
    let mut variances = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let s = C64::new(0.0, grid.omega()[k]);
        let mut g = params.eval(s)?;
        let mut var = DVector::zeros(q);
        if noise_level > 0.0 {
            for (e, z) in g.iter_mut().enumerate() {
                let sigma = noise_level * z.norm();
                var[e] = sigma * sigma;
                let half = sigma / std::f64::consts::SQRT_2;
                let dre: f64 = rng.sample(StandardNormal);
                let dim: f64 = rng.sample(StandardNormal);
                *z += C64::new(half * dre, half * dim);
            }
        }
        responses.push(g);
        variances.push(var);
    }
    let cov = (noise_level > 0.0).then_some(NoiseCov::Diagonal(variances));
    FrfDataset::new(grid.clone(), responses, cov)
}
