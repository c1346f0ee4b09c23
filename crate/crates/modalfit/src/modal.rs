//! Modal models: rigid-body modes, flexible modes with rank-one residue
//! matrices, and an optional constant (residualized high-frequency) term.
//!
//! A general-damping flexible mode contributes L/(s−λ) + L̄/(s−λ̄) with
//! λ in the open upper-left quarter plane and L = ψ_l ψ_rᵀ of rank one (ψ_l,
//! ψ_r complex); a proportionally damped mode contributes
//! φ_l φ_rᵀ/(s² + 2ζωs + ω²) with real shapes; a rigid-body mode contributes
//! φ_l φ_rᵀ/s². The second stage of estimation ([`crate::ipem`]) projects an
//! additive model onto this set, so this module also provides the map from
//! modal parameters to additive ones, the matching *monic image* vector
//! (numerator/denominator coefficients over monic denominators — the
//! coordinates the projection is measured in), and its analytic Jacobian.
//!
//! Mode shapes carry a scaling/phase ambiguity: (ψ_l, ψ_r) and
//! (ψ_l/α, α·ψ_r) give the same residue. [`normalize_gauge`] pins the
//! representative: unit left shape with its largest entry real and positive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::additive::{AdditiveParameters, AdditiveStructure, SubmodelOrders, SubmodelParams};
use crate::{C64, Error, Result};

fn c64(x: f64) -> C64 {
    C64::new(x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingModel {
    /// Complex mode shapes, complex eigenvalues: L/(s−λ) + L̄/(s−λ̄).
    General,
    /// Real mode shapes over s² + 2ζωs + ω².
    Proportional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyMode {
    pub phi_left: DVector<f64>,
    pub phi_right: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FlexibleMode {
    General {
        lambda: C64,
        psi_left: DVector<C64>,
        psi_right: DVector<C64>,
    },
    Proportional {
        omega: f64,
        zeta: f64,
        phi_left: DVector<f64>,
        phi_right: DVector<f64>,
    },
}

impl FlexibleMode {
    /// Undamped natural frequency in Hz (|λ|/2π for a complex pair).
    pub fn natural_frequency_hz(&self) -> f64 {
        match self {
            FlexibleMode::General { lambda, .. } => lambda.norm() / crate::frf::TWO_PI,
            FlexibleMode::Proportional { omega, .. } => omega / crate::frf::TWO_PI,
        }
    }

    /// Damping ratio (−Reλ/|λ| for a complex pair).
    pub fn damping_ratio(&self) -> f64 {
        match self {
            FlexibleMode::General { lambda, .. } => -lambda.re / lambda.norm(),
            FlexibleMode::Proportional { zeta, .. } => *zeta,
        }
    }
}

/// Shape of a modal model, without parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalStructure {
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub damping: DampingModel,
    pub n_rigid: usize,
    pub n_flexible: usize,
    pub has_dc: bool,
}

impl ModalStructure {
    pub fn q(&self) -> usize {
        self.n_outputs * self.n_inputs
    }

    /// Length of the flat parameter vector ρ.
    pub fn rho_len(&self) -> usize {
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        let per_flex = match self.damping {
            DampingModel::General => 2 + 2 * (ny + nu),
            DampingModel::Proportional => 2 + ny + nu,
        };
        self.n_rigid * (ny + nu) + self.n_flexible * per_flex + if self.has_dc { self.q() } else { 0 }
    }

    /// Length of the monic image vector f(ρ): one shared q-block for all
    /// rigid-body modes, per-flexible-mode denominator and numerator
    /// coefficients, and the constant block.
    pub fn image_len(&self) -> usize {
        let q = self.q();
        let per_flex = match self.damping {
            DampingModel::General => 2 + 2 * q,
            DampingModel::Proportional => 2 + q,
        };
        (if self.n_rigid > 0 { q } else { 0 })
            + self.n_flexible * per_flex
            + if self.has_dc { q } else { 0 }
    }
}

/// A fully parametrized modal model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalParameters {
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub damping: DampingModel,
    pub rigid: Vec<RigidBodyMode>,
    pub flexible: Vec<FlexibleMode>,
    pub dc_gain: Option<DMatrix<f64>>,
}

/// λ from a natural frequency and damping ratio:
/// λ = −ζω + jω√(1−ζ²); requires ω > 0 and ζ ∈ (0, 1).
pub fn eigenvalue_from(omega: f64, zeta: f64) -> Result<C64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::Model(format!("natural frequency must be positive, got {omega}")));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Model(format!(
            "damping ratio must lie strictly inside (0, 1), got {zeta}"
        )));
    }
    Ok(C64::new(-zeta * omega, omega * (1.0 - zeta * zeta).sqrt()))
}

impl ModalParameters {
    pub fn structure(&self) -> ModalStructure {
        ModalStructure {
            n_outputs: self.n_outputs,
            n_inputs: self.n_inputs,
            damping: self.damping,
            n_rigid: self.rigid.len(),
            n_flexible: self.flexible.len(),
            has_dc: self.dc_gain.is_some(),
        }
    }

    /// Validity: dimensions consistent, every flexible mode matches the
    /// declared damping model, eigenvalues stable and oscillatory
    /// (Re λ < 0 < Im λ, resp. ω > 0 and 0 < ζ < 1), all values finite.
    pub fn validate(&self) -> Result<()> {
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        if ny == 0 || nu == 0 {
            return Err(Error::Model("modal model needs output and input dimensions".into()));
        }
        if self.rigid.is_empty() && self.flexible.is_empty() && self.dc_gain.is_none() {
            return Err(Error::Model("modal model has no modes at all".into()));
        }
        for (i, m) in self.rigid.iter().enumerate() {
            if m.phi_left.len() != ny || m.phi_right.len() != nu {
                return Err(Error::Model(format!("rigid-body mode {i}: shape dimensions")));
            }
            if m.phi_left.iter().chain(m.phi_right.iter()).any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("rigid-body mode {i}: non-finite shape")));
            }
        }
        for (i, m) in self.flexible.iter().enumerate() {
            match (m, self.damping) {
                (FlexibleMode::General { lambda, psi_left, psi_right }, DampingModel::General) => {
                    if psi_left.len() != ny || psi_right.len() != nu {
                        return Err(Error::Model(format!("flexible mode {i}: shape dimensions")));
                    }
                    if !lambda.re.is_finite() || !lambda.im.is_finite() {
                        return Err(Error::Model(format!("flexible mode {i}: non-finite eigenvalue")));
                    }
                    if !(lambda.re < 0.0) {
                        return Err(Error::Model(format!(
                            "flexible mode {i}: eigenvalue {:.6e}{:+.6e}j is not stable",
                            lambda.re, lambda.im
                        )));
                    }
                    if !(lambda.im > 0.0) {
                        return Err(Error::Model(format!(
                            "flexible mode {i}: representative eigenvalue must have positive \
                             imaginary part, got {:.6e}{:+.6e}j",
                            lambda.re, lambda.im
                        )));
                    }
                    if psi_left
                        .iter()
                        .chain(psi_right.iter())
                        .any(|z| !z.re.is_finite() || !z.im.is_finite())
                    {
                        return Err(Error::Model(format!("flexible mode {i}: non-finite shape")));
                    }
                }
                (FlexibleMode::Proportional { omega, zeta, phi_left, phi_right }, DampingModel::Proportional) => {
                    if phi_left.len() != ny || phi_right.len() != nu {
                        return Err(Error::Model(format!("flexible mode {i}: shape dimensions")));
                    }
                    eigenvalue_from(*omega, *zeta).map_err(|_| {
                        Error::Model(format!(
                            "flexible mode {i}: invalid (omega, zeta) = ({omega}, {zeta})"
                        ))
                    })?;
                    if phi_left.iter().chain(phi_right.iter()).any(|x| !x.is_finite()) {
                        return Err(Error::Model(format!("flexible mode {i}: non-finite shape")));
                    }
                }
                _ => {
                    return Err(Error::Model(format!(
                        "flexible mode {i} does not match the declared damping model"
                    )));
                }
            }
        }
        if let Some(d) = &self.dc_gain {
            if d.shape() != (ny, nu) {
                return Err(Error::Model("constant term has wrong shape".into()));
            }
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::Model("constant term has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// Complex residue matrix of flexible mode `i` at its upper eigenvalue.
    pub fn residue(&self, i: usize) -> Result<(C64, DMatrix<C64>)> {
        match &self.flexible[i] {
            FlexibleMode::General { lambda, psi_left, psi_right } => {
                let l = DMatrix::from_fn(self.n_outputs, self.n_inputs, |r, c| {
                    psi_left[r] * psi_right[c]
                });
                Ok((*lambda, l))
            }
            FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => {
                let lambda = eigenvalue_from(*omega, *zeta)?;
                // R/(s²+2ζωs+ω²) = L/(s−λ) + L̄/(s−λ̄) with L = R/(λ−λ̄).
                let denom = lambda - lambda.conj();
                let l = DMatrix::from_fn(self.n_outputs, self.n_inputs, |r, c| {
                    c64(phi_left[r] * phi_right[c]) / denom
                });
                Ok((lambda, l))
            }
        }
    }

    /// Evaluate the model through its first-order (partial fraction) form.
    pub fn eval(&self, s: C64) -> Result<DMatrix<C64>> {
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        let mut sum = DMatrix::<C64>::zeros(ny, nu);
        if !self.rigid.is_empty() {
            let s2 = s * s;
            if s2.norm() < f64::MIN_POSITIVE {
                return Err(Error::Numerical(
                    "modal evaluation at the rigid-body pole s = 0".into(),
                ));
            }
            for m in &self.rigid {
                for r in 0..ny {
                    for c in 0..nu {
                        sum[(r, c)] += c64(m.phi_left[r] * m.phi_right[c]) / s2;
                    }
                }
            }
        }
        for i in 0..self.flexible.len() {
            let (lambda, l) = self.residue(i)?;
            let d1 = s - lambda;
            let d2 = s - lambda.conj();
            if d1.norm() < f64::MIN_POSITIVE || d2.norm() < f64::MIN_POSITIVE {
                return Err(Error::Numerical(format!(
                    "modal evaluation at the pole of flexible mode {i}"
                )));
            }
            for r in 0..ny {
                for c in 0..nu {
                    sum[(r, c)] += l[(r, c)] / d1 + l[(r, c)].conj() / d2;
                }
            }
        }
        if let Some(d) = &self.dc_gain {
            for r in 0..ny {
                for c in 0..nu {
                    sum[(r, c)] += c64(d[(r, c)]);
                }
            }
        }
        if sum.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numerical("non-finite modal evaluation".into()));
        }
        Ok(sum)
    }

    /// Evaluate through the second-order (real-coefficient) form — an
    /// independent route used to cross-check [`ModalParameters::eval`].
    pub fn eval_second_order(&self, s: C64) -> Result<DMatrix<C64>> {
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        let mut sum = DMatrix::<C64>::zeros(ny, nu);
        let s2 = s * s;
        if !self.rigid.is_empty() {
            if s2.norm() < f64::MIN_POSITIVE {
                return Err(Error::Numerical(
                    "modal evaluation at the rigid-body pole s = 0".into(),
                ));
            }
            for m in &self.rigid {
                for r in 0..ny {
                    for c in 0..nu {
                        sum[(r, c)] += c64(m.phi_left[r] * m.phi_right[c]) / s2;
                    }
                }
            }
        }
        for i in 0..self.flexible.len() {
            let (c0, c1, n0, n1) = self.monic_mode_coefficients(i)?;
            let den = s2 + c64(c1) * s + c64(c0);
            if den.norm() < f64::MIN_POSITIVE {
                return Err(Error::Numerical(format!(
                    "modal evaluation at the pole of flexible mode {i}"
                )));
            }
            for r in 0..ny {
                for c in 0..nu {
                    let num = c64(n0[(r, c)]) + if let Some(n1) = &n1 { c64(n1[(r, c)]) * s } else { C64::new(0.0, 0.0) };
                    sum[(r, c)] += num / den;
                }
            }
        }
        if let Some(d) = &self.dc_gain {
            for r in 0..ny {
                for c in 0..nu {
                    sum[(r, c)] += c64(d[(r, c)]);
                }
            }
        }
        Ok(sum)
    }

    /// Monic second-order coefficients of flexible mode `i`:
    /// (c₀, c₁, N₀, N₁) with the mode equal to (N₁s + N₀)/(s² + c₁s + c₀);
    /// proportional modes have no N₁.
    fn monic_mode_coefficients(
        &self,
        i: usize,
    ) -> Result<(f64, f64, DMatrix<f64>, Option<DMatrix<f64>>)> {
        match &self.flexible[i] {
            FlexibleMode::General { lambda, .. } => {
                let (_, l) = self.residue(i)?;
                let c0 = lambda.norm_sqr();
                let c1 = -2.0 * lambda.re;
                // L/(s−λ) + L̄/(s−λ̄) = (N₁s + N₀)/(s² + c₁s + c₀) with
                // N₁ = 2 Re L and N₀ = −2 Re(λ̄ L).
                let n1 = l.map(|z| 2.0 * z.re);
                let lbar = lambda.conj();
                let n0 = l.map(|z| -2.0 * (lbar * z).re);
                Ok((c0, c1, n0, Some(n1)))
            }
            FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => {
                let c0 = omega * omega;
                let c1 = 2.0 * zeta * omega;
                let n0 = DMatrix::from_fn(self.n_outputs, self.n_inputs, |r, c| {
                    phi_left[r] * phi_right[c]
                });
                Ok((c0, c1, n0, None))
            }
        }
    }

    // -----------------------------------------------------------------
    // Flat parameter vector ρ
    // -----------------------------------------------------------------

    /// Stack the parameters into the flat ρ used by the projection stage:
    /// rigid modes as [φ_l; φ_r], general flexible modes as
    /// [Re λ, Im λ, Re ψ_l, Im ψ_l, Re ψ_r, Im ψ_r], proportional ones as
    /// [ω, ζ, φ_l, φ_r], and the constant block (column-major) last.
    pub fn to_rho(&self) -> DVector<f64> {
        let st = self.structure();
        let mut rho = DVector::zeros(st.rho_len());
        let mut at = 0;
        let mut push = |rho: &mut DVector<f64>, x: f64| {
            rho[at] = x;
            at += 1;
        };
        for m in &self.rigid {
            for &x in m.phi_left.iter() {
                push(&mut rho, x);
            }
            for &x in m.phi_right.iter() {
                push(&mut rho, x);
            }
        }
        for m in &self.flexible {
            match m {
                FlexibleMode::General { lambda, psi_left, psi_right } => {
                    push(&mut rho, lambda.re);
                    push(&mut rho, lambda.im);
                    for z in psi_left.iter() {
                        push(&mut rho, z.re);
                    }
                    for z in psi_left.iter() {
                        push(&mut rho, z.im);
                    }
                    for z in psi_right.iter() {
                        push(&mut rho, z.re);
                    }
                    for z in psi_right.iter() {
                        push(&mut rho, z.im);
                    }
                }
                FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => {
                    push(&mut rho, *omega);
                    push(&mut rho, *zeta);
                    for &x in phi_left.iter() {
                        push(&mut rho, x);
                    }
                    for &x in phi_right.iter() {
                        push(&mut rho, x);
                    }
                }
            }
        }
        if let Some(d) = &self.dc_gain {
            for &x in d.as_slice() {
                push(&mut rho, x);
            }
        }
        debug_assert_eq!(at, rho.len());
        rho
    }

    /// Rebuild parameters from a flat ρ.
    pub fn from_rho(st: &ModalStructure, rho: &DVector<f64>) -> Result<Self> {
        if rho.len() != st.rho_len() {
            return Err(Error::Model(format!(
                "parameter vector has length {}, structure expects {}",
                rho.len(),
                st.rho_len()
            )));
        }
        let (ny, nu) = (st.n_outputs, st.n_inputs);
        let mut at = 0;
        let mut take = |n: usize| {
            let v = DVector::from_iterator(n, (0..n).map(|i| rho[at + i]));
            at += n;
            v
        };
        let rigid = (0..st.n_rigid)
            .map(|_| RigidBodyMode {
                phi_left: take(ny),
                phi_right: take(nu),
            })
            .collect();
        let flexible = (0..st.n_flexible)
            .map(|_| match st.damping {
                DampingModel::General => {
                    let head = take(2);
                    let (ul, vl) = (take(ny), take(ny));
                    let (ur, vr) = (take(nu), take(nu));
                    FlexibleMode::General {
                        lambda: C64::new(head[0], head[1]),
                        psi_left: DVector::from_fn(ny, |i, _| C64::new(ul[i], vl[i])),
                        psi_right: DVector::from_fn(nu, |i, _| C64::new(ur[i], vr[i])),
                    }
                }
                DampingModel::Proportional => {
                    let head = take(2);
                    FlexibleMode::Proportional {
                        omega: head[0],
                        zeta: head[1],
                        phi_left: take(ny),
                        phi_right: take(nu),
                    }
                }
            })
            .collect();
        let dc_gain = st.has_dc.then(|| {
            let v = take(st.q());
            DMatrix::from_column_slice(ny, nu, v.as_slice())
        });
        Ok(ModalParameters {
            n_outputs: ny,
            n_inputs: nu,
            damping: st.damping,
            rigid,
            flexible,
            dc_gain,
        })
    }

    // -----------------------------------------------------------------
    // Map onto the additive model and its monic image
    // -----------------------------------------------------------------

    /// The additive structure this modal shape maps onto: one ℓ=2 block for
    /// all rigid-body modes, one second-order block per flexible mode (with a
    /// degree-1 numerator only under general damping), and a constant block.
    pub fn additive_structure(st: &ModalStructure) -> AdditiveStructure {
        let mut submodels = Vec::new();
        if st.n_rigid > 0 {
            submodels.push(SubmodelOrders { den_order: 0, num_order: 0, integrators: 2 });
        }
        let flex_num_order = match st.damping {
            DampingModel::General => 1,
            DampingModel::Proportional => 0,
        };
        for _ in 0..st.n_flexible {
            submodels.push(SubmodelOrders {
                den_order: 2,
                num_order: flex_num_order,
                integrators: 0,
            });
        }
        if st.has_dc {
            submodels.push(SubmodelOrders { den_order: 0, num_order: 0, integrators: 0 });
        }
        AdditiveStructure {
            n_outputs: st.n_outputs,
            n_inputs: st.n_inputs,
            submodels,
        }
    }

    /// Convert to the additive parametrization (denominators normalized to
    /// constant term 1). Fails if a flexible mode has c₀ = ω² ≤ 0, where that
    /// normalization does not exist.
    pub fn map_to_additive(&self) -> Result<AdditiveParameters> {
        let st = self.structure();
        let astr = Self::additive_structure(&st);
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        let mut subs = Vec::with_capacity(astr.submodels.len());
        if st.n_rigid > 0 {
            let mut b0 = DMatrix::zeros(ny, nu);
            for m in &self.rigid {
                for r in 0..ny {
                    for c in 0..nu {
                        b0[(r, c)] += m.phi_left[r] * m.phi_right[c];
                    }
                }
            }
            subs.push(SubmodelParams { den: DVector::zeros(0), num: vec![b0] });
        }
        for i in 0..self.flexible.len() {
            let (c0, c1, n0, n1) = self.monic_mode_coefficients(i)?;
            if !(c0 > 0.0) || !c0.is_finite() {
                return Err(Error::Model(format!(
                    "flexible mode {i}: monic constant coefficient {c0:e} is not positive; \
                     the constant-1 denominator normalization does not exist"
                )));
            }
            let den = DVector::from_vec(vec![c1 / c0, 1.0 / c0]);
            let mut num = vec![n0.map(|x| x / c0)];
            if let Some(n1) = n1 {
                num.push(n1.map(|x| x / c0));
            }
            subs.push(SubmodelParams { den, num });
        }
        if let Some(d) = &self.dc_gain {
            subs.push(SubmodelParams { den: DVector::zeros(0), num: vec![d.clone()] });
        }
        AdditiveParameters::new(astr, subs)
    }

    /// The monic image f(ρ): the rigid-body residue sum, each flexible
    /// mode's [c₀, c₁, vec N₀ (, vec N₁)] over the *monic* denominator
    /// s² + c₁s + c₀, and the constant block. The projection stage measures
    /// its misfit in these coordinates (they are polynomial in ρ, unlike the
    /// constant-1 normalization, which is rational).
    pub fn modal_image(&self) -> DVector<f64> {
        let st = self.structure();
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        let q = st.q();
        let mut img = DVector::zeros(st.image_len());
        let mut at = 0;
        if st.n_rigid > 0 {
            for m in &self.rigid {
                for c in 0..nu {
                    for r in 0..ny {
                        img[at + c * ny + r] += m.phi_left[r] * m.phi_right[c];
                    }
                }
            }
            at += q;
        }
        for i in 0..self.flexible.len() {
            // Infallible here: the coefficients are polynomial in ρ (unlike
            // the constant-1 normalization used by map_to_additive).
            let (c0, c1, n0, n1) = match &self.flexible[i] {
                FlexibleMode::General { lambda, psi_left, psi_right } => {
                    let l = DMatrix::from_fn(ny, nu, |r, c| psi_left[r] * psi_right[c]);
                    let lbar = lambda.conj();
                    (
                        lambda.norm_sqr(),
                        -2.0 * lambda.re,
                        l.map(|z| -2.0 * (lbar * z).re),
                        Some(l.map(|z| 2.0 * z.re)),
                    )
                }
                FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => (
                    omega * omega,
                    2.0 * zeta * omega,
                    DMatrix::from_fn(ny, nu, |r, c| phi_left[r] * phi_right[c]),
                    None,
                ),
            };
            img[at] = c0;
            img[at + 1] = c1;
            at += 2;
            for &x in n0.as_slice() {
                img[at] = x;
                at += 1;
            }
            if let Some(n1) = n1 {
                for &x in n1.as_slice() {
                    img[at] = x;
                    at += 1;
                }
            }
        }
        if let Some(d) = &self.dc_gain {
            for &x in d.as_slice() {
                img[at] = x;
                at += 1;
            }
        }
        debug_assert_eq!(at, img.len());
        img
    }

    /// Analytic Jacobian ∂f(ρ)/∂ρᵀ of [`ModalParameters::modal_image`],
    /// image_len × rho_len. Block structure: all rigid modes feed the single
    /// residue-sum row block; each flexible mode owns one row block; the
    /// constant block is an identity.
    pub fn jacobian_modal_image(&self) -> DMatrix<f64> {
        let st = self.structure();
        let (ny, nu) = (self.n_outputs, self.n_inputs);
        let q = st.q();
        let mut jac = DMatrix::zeros(st.image_len(), st.rho_len());
        let mut col = 0;
        let mut row = 0;
        if st.n_rigid > 0 {
            for m in &self.rigid {
                // ∂vec(φ_l φ_rᵀ)/∂φ_l = φ_r ⊗ I, ∂/∂φ_r = I ⊗ φ_l.
                for c in 0..nu {
                    for r in 0..ny {
                        jac[(row + c * ny + r, col + r)] += m.phi_right[c];
                        jac[(row + c * ny + r, col + ny + c)] += m.phi_left[r];
                    }
                }
                col += ny + nu;
            }
            row += q;
        }
        for mode in &self.flexible {
            match mode {
                FlexibleMode::General { lambda, psi_left, psi_right } => {
                    let l = DMatrix::from_fn(ny, nu, |r, c| psi_left[r] * psi_right[c]);
                    let lbar = lambda.conj();
                    // Column layout: [Re λ, Im λ, Re ψ_l, Im ψ_l, Re ψ_r, Im ψ_r].
                    let (c_re, c_im) = (col, col + 1);
                    let c_ul = col + 2;
                    let c_vl = c_ul + ny;
                    let c_ur = c_vl + ny;
                    let c_vr = c_ur + nu;

                    // c₀ = Reλ² + Imλ².
                    jac[(row, c_re)] = 2.0 * lambda.re;
                    jac[(row, c_im)] = 2.0 * lambda.im;
                    // c₁ = −2 Reλ.
                    jac[(row + 1, c_re)] = -2.0;

                    // N₀ = −2 Re(λ̄ L), N₁ = 2 Re L.
                    for c in 0..nu {
                        for r in 0..ny {
                            let e = c * ny + r;
                            let r0 = row + 2 + e;
                            let r1 = row + 2 + q + e;
                            let lrc = l[(r, c)];
                            // ∂λ̄/∂Reλ = 1, ∂λ̄/∂Imλ = −j.
                            jac[(r0, c_re)] = -2.0 * lrc.re;
                            jac[(r0, c_im)] = -2.0 * (C64::new(0.0, -1.0) * lrc).re;
                            // ∂L/∂ψ_l[r] = e_r ψ_rᵀ — real and imaginary
                            // perturbations of the shapes.
                            let zr = psi_right[c];
                            jac[(r0, c_ul + r)] = -2.0 * (lbar * zr).re;
                            jac[(r0, c_vl + r)] = -2.0 * (lbar * C64::new(0.0, 1.0) * zr).re;
                            jac[(r1, c_ul + r)] = 2.0 * zr.re;
                            jac[(r1, c_vl + r)] = -2.0 * zr.im;
                            let zl = psi_left[r];
                            jac[(r0, c_ur + c)] = -2.0 * (lbar * zl).re;
                            jac[(r0, c_vr + c)] = -2.0 * (lbar * C64::new(0.0, 1.0) * zl).re;
                            jac[(r1, c_ur + c)] = 2.0 * zl.re;
                            jac[(r1, c_vr + c)] = -2.0 * zl.im;
                        }
                    }
                    row += 2 + 2 * q;
                    col += 2 + 2 * (ny + nu);
                }
                FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => {
                    let (c_w, c_z) = (col, col + 1);
                    let c_l = col + 2;
                    let c_r = c_l + ny;
                    // c₀ = ω², c₁ = 2ζω.
                    jac[(row, c_w)] = 2.0 * omega;
                    jac[(row + 1, c_w)] = 2.0 * zeta;
                    jac[(row + 1, c_z)] = 2.0 * omega;
                    for c in 0..nu {
                        for r in 0..ny {
                            let e = row + 2 + c * ny + r;
                            jac[(e, c_l + r)] = phi_right[c];
                            jac[(e, c_r + c)] = phi_left[r];
                        }
                    }
                    row += 2 + q;
                    col += 2 + ny + nu;
                }
            }
        }
        if st.has_dc {
            for e in 0..q {
                jac[(row + e, col + e)] = 1.0;
            }
        }
        jac
    }

    // -----------------------------------------------------------------
    // Gauge
    // -----------------------------------------------------------------

    /// Pin the scaling/phase gauge of every mode-shape pair: left shape of
    /// unit Euclidean norm with its largest-magnitude entry (first index on
    /// ties) real and positive, all scale moved onto the right shape. A
    /// general mode whose eigenvalue drifted below the real axis is replaced
    /// by its conjugate representative. The transfer function is unchanged.
    pub fn normalize_gauge(&self) -> Result<Self> {
        let mut out = self.clone();
        for (i, m) in out.rigid.iter_mut().enumerate() {
            let (l, r) = (&mut m.phi_left, &mut m.phi_right);
            let norm = l.norm();
            if norm < f64::MIN_POSITIVE {
                return Err(Error::Model(format!(
                    "rigid-body mode {i} has a zero left shape; gauge undefined"
                )));
            }
            let pivot = pivot_index_real(l);
            let alpha = norm * l[pivot].signum();
            *r *= alpha;
            *l /= alpha;
        }
        for (i, m) in out.flexible.iter_mut().enumerate() {
            match m {
                FlexibleMode::General { lambda, psi_left, psi_right } => {
                    if lambda.im < 0.0 {
                        *lambda = lambda.conj();
                        *psi_left = psi_left.map(|z| z.conj());
                        *psi_right = psi_right.map(|z| z.conj());
                    }
                    let norm = psi_left.norm();
                    if norm < f64::MIN_POSITIVE {
                        return Err(Error::Model(format!(
                            "flexible mode {i} has a zero left shape; gauge undefined"
                        )));
                    }
                    let pivot = pivot_index_complex(psi_left);
                    let phase = psi_left[pivot] / c64(psi_left[pivot].norm());
                    let alpha = phase * c64(norm);
                    for z in psi_right.iter_mut() {
                        *z *= alpha;
                    }
                    for z in psi_left.iter_mut() {
                        *z /= alpha;
                    }
                }
                FlexibleMode::Proportional { phi_left, phi_right, .. } => {
                    let norm = phi_left.norm();
                    if norm < f64::MIN_POSITIVE {
                        return Err(Error::Model(format!(
                            "flexible mode {i} has a zero left shape; gauge undefined"
                        )));
                    }
                    let pivot = pivot_index_real(phi_left);
                    let alpha = norm * phi_left[pivot].signum();
                    *phi_right *= alpha;
                    *phi_left /= alpha;
                }
            }
        }
        Ok(out)
    }

    /// Whether all mode shapes satisfy the gauge (used in tests and
    /// invariant checks).
    pub fn is_gauge_normalized(&self, tol: f64) -> bool {
        let check_real = |v: &DVector<f64>| {
            (v.norm() - 1.0).abs() <= tol && v[pivot_index_real(v)] > 0.0
        };
        let check_complex = |v: &DVector<C64>| {
            let p = pivot_index_complex(v);
            (v.norm() - 1.0).abs() <= tol && v[p].re > 0.0 && v[p].im.abs() <= tol * v[p].re.max(1.0)
        };
        self.rigid.iter().all(|m| check_real(&m.phi_left))
            && self.flexible.iter().all(|m| match m {
                FlexibleMode::General { psi_left, .. } => check_complex(psi_left),
                FlexibleMode::Proportional { phi_left, .. } => check_real(phi_left),
            })
    }
}

fn pivot_index_real(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

fn pivot_index_complex(v: &DVector<C64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].norm() > v[best].norm() {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Serialization (modal-v1)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RigidJson {
    phi_left: Vec<f64>,
    phi_right: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FlexJson {
    General {
        lambda_re: f64,
        lambda_im: f64,
        psi_left_re: Vec<f64>,
        psi_left_im: Vec<f64>,
        psi_right_re: Vec<f64>,
        psi_right_im: Vec<f64>,
    },
    Proportional {
        omega: f64,
        zeta: f64,
        phi_left: Vec<f64>,
        phi_right: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModalJson {
    version: String,
    damping_model: DampingModel,
    n_outputs: usize,
    n_inputs: usize,
    rigid_body: Vec<RigidJson>,
    flexible: Vec<FlexJson>,
    /// Column-major entries, absent when the model has no constant term.
    #[serde(skip_serializing_if = "Option::is_none")]
    dc_gain: Option<Vec<f64>>,
}

pub const MODAL_FORMAT: &str = "modal-v1";

pub fn to_json(params: &ModalParameters) -> Result<String> {
    params.validate()?;
    let doc = ModalJson {
        version: MODAL_FORMAT.to_string(),
        damping_model: params.damping,
        n_outputs: params.n_outputs,
        n_inputs: params.n_inputs,
        rigid_body: params
            .rigid
            .iter()
            .map(|m| RigidJson {
                phi_left: m.phi_left.iter().copied().collect(),
                phi_right: m.phi_right.iter().copied().collect(),
            })
            .collect(),
        flexible: params
            .flexible
            .iter()
            .map(|m| match m {
                FlexibleMode::General { lambda, psi_left, psi_right } => FlexJson::General {
                    lambda_re: lambda.re,
                    lambda_im: lambda.im,
                    psi_left_re: psi_left.iter().map(|z| z.re).collect(),
                    psi_left_im: psi_left.iter().map(|z| z.im).collect(),
                    psi_right_re: psi_right.iter().map(|z| z.re).collect(),
                    psi_right_im: psi_right.iter().map(|z| z.im).collect(),
                },
                FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => {
                    FlexJson::Proportional {
                        omega: *omega,
                        zeta: *zeta,
                        phi_left: phi_left.iter().copied().collect(),
                        phi_right: phi_right.iter().copied().collect(),
                    }
                }
            })
            .collect(),
        dc_gain: params
            .dc_gain
            .as_ref()
            .map(|d| d.as_slice().to_vec()),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(e.to_string()))
}

pub fn from_json(text: &str) -> Result<ModalParameters> {
    let doc: ModalJson =
        serde_json::from_str(text).map_err(|e| Error::parse("modal json", e.to_string()))?;
    if doc.version != MODAL_FORMAT {
        return Err(Error::parse(
            "modal json",
            format!("version {:?}, expected {MODAL_FORMAT:?}", doc.version),
        ));
    }
    let (ny, nu) = (doc.n_outputs, doc.n_inputs);
    let rigid = doc
        .rigid_body
        .into_iter()
        .map(|m| RigidBodyMode {
            phi_left: DVector::from_vec(m.phi_left),
            phi_right: DVector::from_vec(m.phi_right),
        })
        .collect();
    let mut flexible = Vec::new();
    for (i, m) in doc.flexible.into_iter().enumerate() {
        let mode = match (m, doc.damping_model) {
            (
                FlexJson::General {
                    lambda_re,
                    lambda_im,
                    psi_left_re,
                    psi_left_im,
                    psi_right_re,
                    psi_right_im,
                },
                DampingModel::General,
            ) => {
                if psi_left_re.len() != psi_left_im.len()
                    || psi_right_re.len() != psi_right_im.len()
                {
                    return Err(Error::parse(
                        "modal json",
                        format!("flexible mode {i}: mismatched re/im arrays"),
                    ));
                }
                FlexibleMode::General {
                    lambda: C64::new(lambda_re, lambda_im),
                    psi_left: DVector::from_iterator(
                        psi_left_re.len(),
                        psi_left_re
                            .iter()
                            .zip(&psi_left_im)
                            .map(|(&r, &i)| C64::new(r, i)),
                    ),
                    psi_right: DVector::from_iterator(
                        psi_right_re.len(),
                        psi_right_re
                            .iter()
                            .zip(&psi_right_im)
                            .map(|(&r, &i)| C64::new(r, i)),
                    ),
                }
            }
            (FlexJson::Proportional { omega, zeta, phi_left, phi_right }, DampingModel::Proportional) => {
                FlexibleMode::Proportional {
                    omega,
                    zeta,
                    phi_left: DVector::from_vec(phi_left),
                    phi_right: DVector::from_vec(phi_right),
                }
            }
            _ => {
                return Err(Error::parse(
                    "modal json",
                    format!("flexible mode {i} does not match damping model"),
                ));
            }
        };
        flexible.push(mode);
    }
    let dc_gain = match doc.dc_gain {
        Some(v) => {
            if v.len() != ny * nu {
                return Err(Error::parse(
                    "modal json",
                    format!("dc_gain has {} entries, expected {}", v.len(), ny * nu),
                ));
            }
            Some(DMatrix::from_column_slice(ny, nu, &v))
        }
        None => None,
    };
    let params = ModalParameters {
        n_outputs: ny,
        n_inputs: nu,
        damping: doc.damping_model,
        rigid,
        flexible,
        dc_gain,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn rand_real(rng: &mut ChaCha12Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    fn rand_complex(rng: &mut ChaCha12Rng, n: usize) -> DVector<C64> {
        DVector::from_fn(n, |_, _| {
            C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        })
    }

    pub(crate) fn random_modal(
        seed: u64,
        ny: usize,
        nu: usize,
        damping: DampingModel,
        n_rigid: usize,
        n_flex: usize,
        with_dc: bool,
    ) -> ModalParameters {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let rigid = (0..n_rigid)
            .map(|_| RigidBodyMode {
                phi_left: rand_real(&mut rng, ny),
                phi_right: rand_real(&mut rng, nu),
            })
            .collect();
        let flexible = (0..n_flex)
            .map(|i| {
                let omega = 20.0 * (i as f64 + 1.0) * (1.0 + 0.3 * rng.random::<f64>());
                let zeta = 0.01 + 0.1 * rng.random::<f64>();
                match damping {
                    DampingModel::General => FlexibleMode::General {
                        lambda: eigenvalue_from(omega, zeta).unwrap(),
                        psi_left: rand_complex(&mut rng, ny),
                        psi_right: rand_complex(&mut rng, nu),
                    },
                    DampingModel::Proportional => FlexibleMode::Proportional {
                        omega,
                        zeta,
                        phi_left: rand_real(&mut rng, ny),
                        phi_right: rand_real(&mut rng, nu),
                    },
                }
            })
            .collect();
        ModalParameters {
            n_outputs: ny,
            n_inputs: nu,
            damping,
            rigid,
            flexible,
            dc_gain: with_dc.then(|| DMatrix::from_fn(ny, nu, |_, _| rng.sample(StandardNormal))),
        }
    }

    #[test]
    fn eigenvalue_conversion() {
        let (omega, zeta) = (2.0 * std::f64::consts::PI * 80.0, 0.03);
        let l = eigenvalue_from(omega, zeta).unwrap();
        assert_relative_eq!(l.norm(), omega, max_relative = 1e-14);
        assert_relative_eq!(-l.re / l.norm(), zeta, max_relative = 1e-12);
        assert!(eigenvalue_from(omega, 1.0).is_err());
        assert!(eigenvalue_from(omega, 0.0).is_err());
        assert!(eigenvalue_from(-1.0, 0.3).is_err());
    }

    #[test]
    fn first_and_second_order_forms_agree() {
        for (seed, damping) in [(1u64, DampingModel::General), (2, DampingModel::Proportional)] {
            let m = random_modal(seed, 2, 3, damping, 2, 3, true);
            m.validate().unwrap();
            for &w in &[0.7, 31.0, 260.0] {
                let s = C64::new(0.0, w);
                let a = m.eval(s).unwrap();
                let b = m.eval_second_order(s).unwrap();
                let diff = (&a - &b).norm() / a.norm();
                assert!(diff < 1e-12, "routes disagree by {diff:e} at omega {w}");
            }
        }
    }

    #[test]
    fn rho_round_trips() {
        for damping in [DampingModel::General, DampingModel::Proportional] {
            let m = random_modal(3, 2, 3, damping, 1, 2, true);
            let st = m.structure();
            let rho = m.to_rho();
            assert_eq!(rho.len(), st.rho_len());
            let back = ModalParameters::from_rho(&st, &rho).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn additive_map_preserves_the_transfer_function() {
        for (seed, damping) in [(5u64, DampingModel::General), (6, DampingModel::Proportional)] {
            let m = random_modal(seed, 3, 2, damping, 2, 4, true);
            let add = m.map_to_additive().unwrap();
            add.validate_dynamics().unwrap();
            for &w in &[1.3, 47.0, 310.0] {
                let s = C64::new(0.0, w);
                let a = m.eval(s).unwrap();
                let b = add.eval(s).unwrap();
                let diff = (&a - &b).norm() / a.norm();
                assert!(diff < 1e-12, "modal vs additive differ by {diff:e}");
            }
        }
    }

    /// The monic image must agree with the additive map: renormalizing each
    /// flexible block of the additive parameters to a monic denominator
    /// reproduces exactly the image coordinates.
    #[test]
    fn image_is_the_monic_rescaling_of_the_additive_map() {
        for (seed, damping) in [(7u64, DampingModel::General), (8, DampingModel::Proportional)] {
            let m = random_modal(seed, 2, 2, damping, 1, 3, true);
            let add = m.map_to_additive().unwrap();
            let img = m.modal_image();
            let q = 4;
            let mut at = 0;
            let mut sub = 0;
            // Rigid block: B₀ directly.
            for &x in add.submodels[sub].num[0].as_slice() {
                assert_relative_eq!(img[at], x, max_relative = 1e-14);
                at += 1;
            }
            sub += 1;
            for _ in 0..3 {
                let p = &add.submodels[sub];
                let (a1, a2) = (p.den[0], p.den[1]);
                let c0 = 1.0 / a2;
                let c1 = a1 / a2;
                assert_relative_eq!(img[at], c0, max_relative = 1e-12);
                assert_relative_eq!(img[at + 1], c1, max_relative = 1e-12);
                at += 2;
                for b in &p.num {
                    for &x in b.as_slice() {
                        assert_relative_eq!(img[at], x / a2, max_relative = 1e-12);
                        at += 1;
                    }
                }
                sub += 1;
            }
            // Constant block.
            for &x in add.submodels[sub].num[0].as_slice() {
                assert_relative_eq!(img[at], x, max_relative = 1e-14);
                at += 1;
            }
            assert_eq!(at, img.len());
            assert_eq!(img.len(), m.structure().image_len());
            let _ = q;
        }
    }

    #[test]
    fn image_jacobian_matches_finite_differences() {
        for (seed, damping) in [(11u64, DampingModel::General), (12, DampingModel::Proportional)] {
            let m = random_modal(seed, 2, 3, damping, 2, 2, true);
            let st = m.structure();
            let rho = m.to_rho();
            let jac = m.jacobian_modal_image();
            assert_eq!(jac.shape(), (st.image_len(), st.rho_len()));
            let scale = rho.amax();
            let mut fd = DMatrix::zeros(st.image_len(), st.rho_len());
            for j in 0..rho.len() {
                let h = 5e-6 * rho[j].abs().max(1e-4 * scale);
                let mut rp = rho.clone();
                rp[j] += h;
                let mut rm = rho.clone();
                rm[j] -= h;
                let fp = ModalParameters::from_rho(&st, &rp).unwrap().modal_image();
                let fm = ModalParameters::from_rho(&st, &rm).unwrap().modal_image();
                fd.set_column(j, &((fp - fm) / (2.0 * h)));
            }
            let err = (&jac - &fd).norm() / fd.norm();
            assert!(err < 1e-7, "jacobian vs FD: {err:e}");
        }
    }

    #[test]
    fn gauge_normalization_properties() {
        let m = random_modal(15, 3, 2, DampingModel::General, 2, 3, true);
        assert!(!m.is_gauge_normalized(1e-12));
        let g = m.normalize_gauge().unwrap();
        assert!(g.is_gauge_normalized(1e-12));
        // The transfer function is untouched.
        for &w in &[2.0, 90.0] {
            let s = C64::new(0.0, w);
            let a = m.eval(s).unwrap();
            let b = g.eval(s).unwrap();
            assert!((&a - &b).norm() <= 1e-13 * a.norm());
        }
        // Idempotent up to rounding.
        let gg = g.normalize_gauge().unwrap();
        let da = (gg.to_rho() - g.to_rho()).norm();
        assert!(da <= 1e-13 * g.to_rho().norm());

        // A conjugate-flipped eigenvalue is restored to the upper half plane.
        let mut flipped = m.clone();
        if let FlexibleMode::General { lambda, psi_left, psi_right } = &mut flipped.flexible[0] {
            *lambda = lambda.conj();
            *psi_left = psi_left.map(|z| z.conj());
            *psi_right = psi_right.map(|z| z.conj());
        }
        let gf = flipped.normalize_gauge().unwrap();
        gf.validate().unwrap();
        for &w in &[2.0, 90.0] {
            let s = C64::new(0.0, w);
            let a = m.eval(s).unwrap();
            let b = gf.eval(s).unwrap();
            assert!((&a - &b).norm() <= 1e-13 * a.norm());
        }

        // Zero left shape → explicit error.
        let mut broken = m.clone();
        if let FlexibleMode::General { psi_left, .. } = &mut broken.flexible[1] {
            psi_left.fill(C64::new(0.0, 0.0));
        }
        assert!(broken.normalize_gauge().is_err());
    }

    #[test]
    fn validation_rejects_invalid_modes() {
        let mut m = random_modal(17, 2, 2, DampingModel::General, 1, 2, false);
        if let FlexibleMode::General { lambda, .. } = &mut m.flexible[0] {
            *lambda = C64::new(0.1, 50.0); // unstable
        }
        assert!(m.validate().is_err());

        let mut m = random_modal(18, 2, 2, DampingModel::Proportional, 0, 2, false);
        if let FlexibleMode::Proportional { zeta, .. } = &mut m.flexible[0] {
            *zeta = 1.2; // overdamped
        }
        assert!(m.validate().is_err());

        // Damping-model mismatch.
        let mut m = random_modal(19, 2, 2, DampingModel::General, 0, 2, false);
        m.damping = DampingModel::Proportional;
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        for damping in [DampingModel::General, DampingModel::Proportional] {
            let m = random_modal(21, 2, 3, damping, 2, 2, true)
                .normalize_gauge()
                .unwrap();
            let text = to_json(&m).unwrap();
            let back = from_json(&text).unwrap();
            assert_eq!(back, m);
        }
        let m = random_modal(22, 1, 1, DampingModel::General, 0, 1, false);
        let text = to_json(&m).unwrap();
        assert!(from_json(&text.replace("modal-v1", "modal-v0")).is_err());
    }

    proptest! {
        /// Gauge normalization always produces a unit left shape with a real
        /// positive pivot and preserves the rank-one residue.
        #[test]
        fn gauge_property(
            re in proptest::collection::vec(-10.0f64..10.0, 3),
            im in proptest::collection::vec(-10.0f64..10.0, 3),
            rr in proptest::collection::vec(-10.0f64..10.0, 2),
            ri in proptest::collection::vec(-10.0f64..10.0, 2),
        ) {
            let psi_l = DVector::from_fn(3, |i, _| C64::new(re[i], im[i]));
            let psi_r = DVector::from_fn(2, |i, _| C64::new(rr[i], ri[i]));
            prop_assume!(psi_l.norm() > 1e-6);
            let m = ModalParameters {
                n_outputs: 3,
                n_inputs: 2,
                damping: DampingModel::General,
                rigid: vec![],
                flexible: vec![FlexibleMode::General {
                    lambda: C64::new(-1.0, 30.0),
                    psi_left: psi_l.clone(),
                    psi_right: psi_r.clone(),
                }],
                dc_gain: None,
            };
            let g = m.normalize_gauge().unwrap();
            prop_assert!(g.is_gauge_normalized(1e-10));
            let (_, l0) = m.residue(0).unwrap();
            let (_, l1) = g.residue(0).unwrap();
            let scale = l0.norm().max(1e-12);
            prop_assert!((l0 - l1).norm() <= 1e-10 * scale);
        }
    }
}
