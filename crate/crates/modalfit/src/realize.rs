//! Real state-space realization of a modal model.
//!
//! Each mode contributes a 2×2 diagonal block: [[0,1],[0,0]] for rigid-body
//! motion, the companion block of s² + 2ζωs + ω² for proportional modes, and
//! [[0,1],[−|λ|², 2Reλ]] for general complex pairs. The general blocks are
//! obtained by similarity from the complex diagonal pair diag(λ, λ̄) with
//! T = [[1,1],[λ,λ̄]]; the products are formed in complex arithmetic and the
//! (analytically zero) imaginary parts are checked before truncation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::modal::{FlexibleMode, ModalParameters};
use crate::{C64, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
}

/// Largest tolerated imaginary leakage, relative to the block magnitude.
const IMAG_RESIDUE_TOL: f64 = 1e-10;

fn truncate_real(m: &DMatrix<C64>, context: &str) -> Result<DMatrix<f64>> {
    let scale = m.iter().map(|z| z.norm()).fold(0.0_f64, f64::max).max(1.0);
    let worst = m.iter().map(|z| z.im.abs()).fold(0.0_f64, f64::max);
    if worst > IMAG_RESIDUE_TOL * scale {
        return Err(Error::Numerical(format!(
            "{context}: imaginary residue {worst:e} exceeds {IMAG_RESIDUE_TOL:e} of the block \
             scale {scale:e}"
        )));
    }
    Ok(m.map(|z| z.re))
}

/// Build the block-diagonal real realization. States are ordered rigid-body
/// modes first, then flexible modes, two states each; D is the constant gain.
pub fn realize(modal: &ModalParameters) -> Result<StateSpace> {
    modal.validate()?;
    let (ny, nu) = (modal.n_outputs, modal.n_inputs);
    let n_modes = modal.rigid.len() + modal.flexible.len();
    let n = 2 * n_modes;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, nu);
    let mut c = DMatrix::zeros(ny, n);

    let mut block = 0;
    for m in &modal.rigid {
        let r0 = 2 * block;
        a[(r0, r0 + 1)] = 1.0;
        for j in 0..nu {
            b[(r0 + 1, j)] = m.phi_right[j];
        }
        for i in 0..ny {
            c[(i, r0)] = m.phi_left[i];
        }
        block += 1;
    }

    for (k, mode) in modal.flexible.iter().enumerate() {
        let r0 = 2 * block;
        match mode {
            FlexibleMode::Proportional { omega, zeta, phi_left, phi_right } => {
                a[(r0, r0 + 1)] = 1.0;
                a[(r0 + 1, r0)] = -omega * omega;
                a[(r0 + 1, r0 + 1)] = -2.0 * zeta * omega;
                for j in 0..nu {
                    b[(r0 + 1, j)] = phi_right[j];
                }
                for i in 0..ny {
                    c[(i, r0)] = phi_left[i];
                }
            }
            FlexibleMode::General { lambda, psi_left, psi_right } => {
                let l = *lambda;
                let t = DMatrix::from_row_slice(
                    2,
                    2,
                    &[C64::new(1.0, 0.0), C64::new(1.0, 0.0), l, l.conj()],
                );
                let det = l.conj() - l;
                let t_inv = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        l.conj() / det,
                        -C64::new(1.0, 0.0) / det,
                        -l / det,
                        C64::new(1.0, 0.0) / det,
                    ],
                );
                let a_c = DMatrix::from_diagonal(&DVector::from_vec(vec![l, l.conj()]));
                let mut b_c = DMatrix::zeros(2, nu);
                for j in 0..nu {
                    b_c[(0, j)] = psi_right[j];
                    b_c[(1, j)] = psi_right[j].conj();
                }
                let mut c_c = DMatrix::zeros(ny, 2);
                for i in 0..ny {
                    c_c[(i, 0)] = psi_left[i];
                    c_c[(i, 1)] = psi_left[i].conj();
                }
                let ctx = format!("flexible mode {k}");
                let a_r = truncate_real(&(&t * &a_c * &t_inv), &ctx)?;
                let b_r = truncate_real(&(&t * &b_c), &ctx)?;
                let c_r = truncate_real(&(&c_c * &t_inv), &ctx)?;
                a.view_mut((r0, r0), (2, 2)).copy_from(&a_r);
                b.view_mut((r0, 0), (2, nu)).copy_from(&b_r);
                c.view_mut((0, r0), (ny, 2)).copy_from(&c_r);
            }
        }
        block += 1;
    }

    let d = modal
        .dc_gain
        .clone()
        .unwrap_or_else(|| DMatrix::zeros(ny, nu));
    Ok(StateSpace { a, b, c, d })
}

/// Evaluate C(sI − A)⁻¹B + D.
pub fn eval_ss(ss: &StateSpace, s: C64) -> Result<DMatrix<C64>> {
    let n = ss.n_states();
    let mut resolvent_arg = DMatrix::from_fn(n, n, |i, j| C64::new(-ss.a[(i, j)], 0.0));
    for i in 0..n {
        resolvent_arg[(i, i)] += s;
    }
    let lu = resolvent_arg.lu();
    let b_c = ss.b.map(|x| C64::new(x, 0.0));
    let x = lu.solve(&b_c).ok_or(Error::PoleEvaluation {
        submodel: usize::MAX,
        s_re: s.re,
        s_im: s.im,
    })?;
    let c_c = ss.c.map(|x| C64::new(x, 0.0));
    let mut g = &c_c * &x;
    for i in 0..ss.n_outputs() {
        for j in 0..ss.n_inputs() {
            g[(i, j)] += C64::new(ss.d[(i, j)], 0.0);
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Serialization (ss-v1)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StateSpaceJson {
    version: String,
    n_states: usize,
    n_outputs: usize,
    n_inputs: usize,
    /// Row-major dense entries.
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

pub const SS_FORMAT: &str = "ss-v1";

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], name: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::parse(
            "state-space json",
            format!("matrix {name}: {} entries, expected {rows}×{cols}", data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

pub fn to_json(ss: &StateSpace) -> Result<String> {
    let doc = StateSpaceJson {
        version: SS_FORMAT.to_string(),
        n_states: ss.n_states(),
        n_outputs: ss.n_outputs(),
        n_inputs: ss.n_inputs(),
        a: row_major(&ss.a),
        b: row_major(&ss.b),
        c: row_major(&ss.c),
        d: row_major(&ss.d),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Numerical(e.to_string()))
}

pub fn from_json(text: &str) -> Result<StateSpace> {
    let doc: StateSpaceJson = serde_json::from_str(text)
        .map_err(|e| Error::parse("state-space json", e.to_string()))?;
    if doc.version != SS_FORMAT {
        return Err(Error::parse(
            "state-space json",
            format!("version {:?}, expected {SS_FORMAT:?}", doc.version),
        ));
    }
    let (n, ny, nu) = (doc.n_states, doc.n_outputs, doc.n_inputs);
    Ok(StateSpace {
        a: from_row_major(n, n, &doc.a, "a")?,
        b: from_row_major(n, nu, &doc.b, "b")?,
        c: from_row_major(ny, n, &doc.c, "c")?,
        d: from_row_major(ny, nu, &doc.d, "d")?,
    })
}
