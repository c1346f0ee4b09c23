//! Thin, safe wrappers around the LAPACK backend.
//!
//! nalgebra's pure-Rust factorizations are fine for small matrices, but the
//! estimation problems here reach a few thousand parameters, where LAPACK
//! (dgetrf/dgesdd/dgeev/dpotrf) is the difference between seconds and
//! minutes. Everything in this module takes and returns nalgebra types;
//! column-major storage maps directly onto LAPACK's Fortran layout, so no
//! copies beyond the unavoidable in-place factorization buffers.

use lax::layout::MatrixLayout;
use lax::{JobSvd, Lapack, NormType, Transpose, UPLO};
use nalgebra::{DMatrix, DVector};

use crate::{C64, Error, Result};

fn lax_err(routine: &str, e: lax::error::Error) -> Error {
    Error::Lapack {
        routine: routine.to_string(),
        detail: e.to_string(),
    }
}

/// Fortran layout descriptor for an `nrows × ncols` dense matrix.
fn layout(nrows: usize, ncols: usize) -> MatrixLayout {
    MatrixLayout::F {
        col: ncols as i32,
        lda: nrows.max(1) as i32,
    }
}

/// Solve `A X = B` for square `A` by LU with partial pivoting.
///
/// Consumes `A` (it is overwritten by the factors). Fails on dimension
/// mismatch or an exactly singular factor.
pub fn solve_square(mut a: DMatrix<f64>, mut b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical(format!(
            "solve_square needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != n {
        return Err(Error::Numerical(format!(
            "right-hand side has {} rows, matrix has {}",
            b.nrows(),
            n
        )));
    }
    let l = layout(n, n);
    let piv = <f64 as Lapack>::lu(l, a.as_mut_slice()).map_err(|e| lax_err("dgetrf", e))?;
    // lax's solve binds a single right-hand side per call.
    for mut col in b.column_iter_mut() {
        let slice: &mut [f64] = col.as_mut_slice();
        <f64 as Lapack>::solve(l, Transpose::No, a.as_slice(), &piv, slice)
            .map_err(|e| lax_err("dgetrs", e))?;
    }
    Ok(b)
}

/// Solve the (possibly badly scaled) normal equations `M X = R`.
///
/// Rows and then columns of `M` are equilibrated to unit max-norm before
/// factorization — both sides index the same parameter vector, so its unit
/// spread contaminates the conditioning twice — and the reciprocal condition
/// number of the equilibrated matrix is estimated (dgecon). A condition
/// estimate beyond `1/ε` — or an exactly singular factor, or an identically
/// zero row or column — reports [`Error::SingularNormalEquations`] with the
/// estimate, since at that point the solution carries no trustworthy digits.
pub fn solve_normal_equations(
    m: &DMatrix<f64>,
    r: &DMatrix<f64>,
    context: &str,
) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n || r.nrows() != n {
        return Err(Error::Numerical(format!(
            "normal equations shape mismatch: M is {}x{}, R has {} rows",
            m.nrows(),
            m.ncols(),
            r.nrows()
        )));
    }
    let mut eq = m.clone();
    let mut row_scale = DVector::zeros(n);
    for i in 0..n {
        let max = eq.row(i).amax();
        if max == 0.0 || !max.is_finite() {
            return Err(Error::SingularNormalEquations {
                context: format!("{context} (row {i} of the normal matrix is zero)"),
                cond: f64::INFINITY,
            });
        }
        row_scale[i] = 1.0 / max;
        eq.row_mut(i).scale_mut(row_scale[i]);
    }
    let mut scale = DVector::zeros(n);
    for j in 0..n {
        let max = eq.column(j).amax();
        if max == 0.0 || !max.is_finite() {
            return Err(Error::SingularNormalEquations {
                context: format!("{context} (column {j} of the normal matrix is zero)"),
                cond: f64::INFINITY,
            });
        }
        scale[j] = 1.0 / max;
        eq.column_mut(j).scale_mut(scale[j]);
    }

    let l = layout(n, n);
    let anorm = <f64 as Lapack>::opnorm(NormType::One, l, eq.as_slice());
    let piv = match <f64 as Lapack>::lu(l, eq.as_mut_slice()) {
        Ok(p) => p,
        Err(_) => {
            return Err(Error::SingularNormalEquations {
                context: context.to_string(),
                cond: f64::INFINITY,
            });
        }
    };
    let rcond =
        <f64 as Lapack>::rcond(l, eq.as_slice(), anorm).map_err(|e| lax_err("dgecon", e))?;
    if !rcond.is_finite() || rcond < f64::EPSILON {
        return Err(Error::SingularNormalEquations {
            context: context.to_string(),
            cond: if rcond > 0.0 { 1.0 / rcond } else { f64::INFINITY },
        });
    }

    // (Dr M Dc)(Dc⁻¹ X) = Dr R  ⇒  solve for Y = Dc⁻¹ X with the scaled
    // right-hand side, then undo the column scaling.
    let mut x = r.clone();
    for (i, mut row) in x.row_iter_mut().enumerate() {
        row.scale_mut(row_scale[i]);
    }
    for mut col in x.column_iter_mut() {
        let slice: &mut [f64] = col.as_mut_slice();
        <f64 as Lapack>::solve(l, Transpose::No, eq.as_slice(), &piv, slice)
            .map_err(|e| lax_err("dgetrs", e))?;
    }
    for (j, mut row) in x.row_iter_mut().enumerate() {
        row.scale_mut(scale[j]);
    }
    Ok(x)
}

/// Invert a general square matrix by LU (dgetrf + dgetri).
pub fn invert(mut a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical("inverse of a non-square matrix".into()));
    }
    let l = layout(n, n);
    let piv = <f64 as Lapack>::lu(l, a.as_mut_slice()).map_err(|e| lax_err("dgetrf", e))?;
    <f64 as Lapack>::inv(l, a.as_mut_slice(), &piv).map_err(|e| lax_err("dgetri", e))?;
    Ok(a)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`Error::Numerical`] when the matrix is not numerically
/// positive definite; the message names the offending leading minor.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut f = a.clone();
    let l = layout(n, n);
    <f64 as Lapack>::cholesky(l, UPLO::Lower, f.as_mut_slice()).map_err(|e| match e {
        lax::error::Error::LapackComputationalFailure { return_code } => Error::Numerical(format!(
            "matrix is not positive definite (leading minor {return_code})"
        )),
        other => lax_err("dpotrf", other),
    })?;
    // dpotrf leaves the strict upper triangle untouched; zero it out.
    for j in 1..n {
        for i in 0..j {
            f[(i, j)] = 0.0;
        }
    }
    Ok(f)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky
/// (dpotrf + dpotri). The result is explicitly symmetrized.
pub fn invert_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut f = a.clone();
    let l = layout(n, n);
    <f64 as Lapack>::cholesky(l, UPLO::Lower, f.as_mut_slice()).map_err(|e| match e {
        lax::error::Error::LapackComputationalFailure { return_code } => Error::Numerical(format!(
            "matrix is not positive definite (leading minor {return_code})"
        )),
        other => lax_err("dpotrf", other),
    })?;
    <f64 as Lapack>::inv_cholesky(l, UPLO::Lower, f.as_mut_slice())
        .map_err(|e| lax_err("dpotri", e))?;
    // dpotri fills only the lower triangle; mirror it.
    for j in 0..n {
        for i in (j + 1)..n {
            f[(j, i)] = f[(i, j)];
        }
    }
    Ok(f)
}

/// Whether a symmetric matrix is positive semidefinite up to a relative
/// shift: checks that `A + tol·diag_scale·I` admits a Cholesky factor.
pub fn is_positive_semidefinite(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let scale = a.diagonal().amax().max(a.amax());
    let shift = rel_tol * if scale > 0.0 { scale } else { 1.0 };
    let mut f = a.clone();
    for i in 0..n {
        f[(i, i)] += shift;
    }
    let l = layout(n, n);
    <f64 as Lapack>::cholesky(l, UPLO::Lower, f.as_mut_slice()).is_ok()
}

/// Thin singular value decomposition `A = U Σ Vᵀ`.
pub struct ThinSvd {
    /// `m × k` left singular vectors, `k = min(m, n)`.
    pub u: DMatrix<f64>,
    /// Singular values, descending.
    pub s: DVector<f64>,
    /// `k × n` transposed right singular vectors.
    pub vt: DMatrix<f64>,
}

/// Thin SVD by divide-and-conquer (dgesdd).
pub fn svd_thin(a: &DMatrix<f64>) -> Result<ThinSvd> {
    let (m, n) = a.shape();
    let k = m.min(n);
    let mut work = a.clone();
    let out = <f64 as Lapack>::svddc(layout(m, n), JobSvd::Some, work.as_mut_slice())
        .map_err(|e| lax_err("dgesdd", e))?;
    let u = DMatrix::from_column_slice(
        m,
        k,
        out.u
            .as_deref()
            .ok_or_else(|| Error::Numerical("dgesdd returned no U factor".into()))?,
    );
    let vt = DMatrix::from_column_slice(
        k,
        n,
        out.vt
            .as_deref()
            .ok_or_else(|| Error::Numerical("dgesdd returned no Vt factor".into()))?,
    );
    Ok(ThinSvd {
        u,
        s: DVector::from_vec(out.s),
        vt,
    })
}

/// Eigenvalues and right eigenvectors of a general real matrix (dgeev).
///
/// Complex conjugate pairs come out exactly conjugate, as produced by the
/// underlying real Schur form.
pub fn eig(a: &DMatrix<f64>) -> Result<(Vec<C64>, DMatrix<C64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical(
            "eigendecomposition of a non-square matrix".into(),
        ));
    }
    let mut work = a.clone();
    let (eigs, vecs) = <f64 as Lapack>::eig(true, layout(n, n), work.as_mut_slice())
        .map_err(|e| lax_err("dgeev", e))?;
    if vecs.len() != n * n {
        return Err(Error::Numerical(format!(
            "dgeev returned {} eigenvector entries, expected {}",
            vecs.len(),
            n * n
        )));
    }
    Ok((eigs, DMatrix::from_column_slice(n, n, &vecs)))
}

/// Eigendecomposition of a real symmetric matrix (dsyev): eigenvalues in
/// ascending order, orthonormal eigenvectors in the columns of the second
/// return value. Only the lower triangle of `a` is referenced.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical(
            "symmetric eigendecomposition of a non-square matrix".into(),
        ));
    }
    let mut work = a.as_slice().to_vec();
    let w = <f64 as Lapack>::eigh(true, layout(n, n), UPLO::Lower, &mut work)
        .map_err(|e| lax_err("dsyev", e))?;
    Ok((
        DVector::from_vec(w),
        DMatrix::from_column_slice(n, n, &work),
    ))
}

/// Roots of a real polynomial `c[0] + c[1] s + … + c[d] s^d` given by its
/// ascending coefficients.
///
/// Degrees 0–2 are handled analytically (the quadratic uses the
/// cancellation-free formula); higher degrees go through the companion
/// matrix and dgeev. The leading coefficient must be nonzero.
pub fn real_poly_roots(coeffs: &[f64]) -> Result<Vec<C64>> {
    if coeffs.is_empty() {
        return Err(Error::Numerical("empty polynomial".into()));
    }
    if !coeffs.iter().all(|c| c.is_finite()) {
        return Err(Error::Numerical("non-finite polynomial coefficient".into()));
    }
    let d = coeffs.len() - 1;
    if d > 0 && coeffs[d] == 0.0 {
        return Err(Error::Numerical(
            "leading polynomial coefficient is zero".into(),
        ));
    }
    match d {
        0 => Ok(Vec::new()),
        1 => Ok(vec![C64::new(-coeffs[0] / coeffs[1], 0.0)]),
        2 => {
            let (c0, c1, c2) = (coeffs[0], coeffs[1], coeffs[2]);
            let disc = c1 * c1 - 4.0 * c2 * c0;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                // q = -(c1 + sign(c1)·√disc)/2 avoids subtracting near-equal numbers.
                let q = -0.5 * (c1 + c1.signum() * sq);
                let (r1, r2) = if q != 0.0 {
                    (q / c2, c0 / q)
                } else {
                    // c1 == 0 and disc == 0 ⇒ double root at zero.
                    (0.0, 0.0)
                };
                Ok(vec![C64::new(r1, 0.0), C64::new(r2, 0.0)])
            } else {
                let re = -c1 / (2.0 * c2);
                let im = (-disc).sqrt() / (2.0 * c2.abs());
                Ok(vec![C64::new(re, im), C64::new(re, -im)])
            }
        }
        _ => {
            let lead = coeffs[d];
            let mut comp = DMatrix::<f64>::zeros(d, d);
            for i in 1..d {
                comp[(i, i - 1)] = 1.0;
            }
            for i in 0..d {
                comp[(i, d - 1)] = -coeffs[i] / lead;
            }
            let (eigs, _) = eig(&comp)?;
            Ok(eigs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha12Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn square_solve_matches_nalgebra() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 8, 8);
        let b = random_matrix(&mut rng, 8, 3);
        let x = solve_square(a.clone(), b.clone()).unwrap();
        let x_ref = a.clone().lu().solve(&b).unwrap();
        assert_relative_eq!(x, x_ref, epsilon = 1e-10);
        assert_relative_eq!(&a * &x, b, epsilon = 1e-10);
    }

    #[test]
    fn equilibrated_solve_handles_bad_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 6;
        let base = random_matrix(&mut rng, n, n) + DMatrix::identity(n, n) * 3.0;
        let mut m = base.clone();
        // Scale columns over 12 orders of magnitude.
        for j in 0..n {
            m.column_mut(j).scale_mut(10f64.powi(2 * j as i32 - 6));
        }
        let x_true = random_matrix(&mut rng, n, 2);
        let r = &m * &x_true;
        let x = solve_normal_equations(&m, &r, "test").unwrap();
        // Badly scaled columns limit component-wise forward accuracy; the
        // equilibrated solve still guarantees a small backward error.
        let resid = (&m * &x - &r).norm() / (m.norm() * x.norm()).max(1e-300);
        assert!(resid < 1e-13, "relative residual {resid:e}");
        // Forward error in the well-scaled directions stays tight.
        let moderate = base.clone();
        let rm = &moderate * &x_true;
        let xm = solve_normal_equations(&moderate, &rm, "test").unwrap();
        assert_relative_eq!(xm, x_true, epsilon = 1e-9);
    }

    #[test]
    fn singular_normal_equations_are_reported() {
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        // Third column identically zero.
        let r = DMatrix::identity(3, 3);
        match solve_normal_equations(&m, &r, "unit-test") {
            Err(Error::SingularNormalEquations { context, .. }) => {
                assert!(context.contains("unit-test"));
            }
            other => panic!("expected singular-system error, got {other:?}"),
        }
        // Rank-deficient but no zero column.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let col = random_matrix(&mut rng, 3, 1);
        let rank1 = &col * col.transpose();
        assert!(matches!(
            solve_normal_equations(&rank1, &r, "rank1"),
            Err(Error::SingularNormalEquations { .. })
        ));
    }

    #[test]
    fn spd_inverse_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 12;
        let g = random_matrix(&mut rng, n, n);
        let spd = &g * g.transpose() + DMatrix::identity(n, n) * (n as f64);
        let inv = invert_spd(&spd).unwrap();
        assert_relative_eq!(&spd * &inv, DMatrix::identity(n, n), epsilon = 1e-9);
        assert_relative_eq!(inv.clone(), inv.transpose(), epsilon = 0.0);

        let gen_inv = invert(spd.clone()).unwrap();
        assert_relative_eq!(inv, gen_inv, epsilon = 1e-9);
    }

    #[test]
    fn cholesky_factor_reconstructs() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 9;
        let g = random_matrix(&mut rng, n, n);
        let spd = &g * g.transpose() + DMatrix::identity(n, n) * (n as f64);
        let l = cholesky_lower(&spd).unwrap();
        assert_relative_eq!(&l * l.transpose(), spd, epsilon = 1e-9);
        for j in 1..n {
            for i in 0..j {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
        let indef = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(cholesky_lower(&indef).is_err());
        assert!(!is_positive_semidefinite(&indef, 1e-12));
        assert!(is_positive_semidefinite(&spd, 1e-12));
        // A PSD matrix with an exactly zero eigenvalue passes the tolerant check.
        let psd = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(is_positive_semidefinite(&psd, 1e-12));
    }

    #[test]
    fn thin_svd_matches_nalgebra() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for &(m, n) in &[(7usize, 4usize), (4, 7), (5, 5)] {
            let a = random_matrix(&mut rng, m, n);
            let svd = svd_thin(&a).unwrap();
            let k = m.min(n);
            assert_eq!(svd.u.shape(), (m, k));
            assert_eq!(svd.vt.shape(), (k, n));
            let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.s) * &svd.vt;
            assert_relative_eq!(rebuilt, a, epsilon = 1e-10);
            let reference = a.clone().svd(false, false);
            let mut ref_s: Vec<f64> = reference.singular_values.iter().copied().collect();
            ref_s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (got, want) in svd.s.iter().zip(ref_s.iter()) {
                assert_relative_eq!(got, want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn eigen_pairs_satisfy_definition() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 6;
        let a = random_matrix(&mut rng, n, n);
        let (eigs, vecs) = eig(&a).unwrap();
        let ac = a.map(|x| C64::new(x, 0.0));
        for (j, lambda) in eigs.iter().enumerate() {
            let v = vecs.column(j);
            let resid = &ac * v - v * *lambda;
            assert!(resid.norm() < 1e-10 * a.norm(), "eigenpair {j} residual");
        }
    }

    #[test]
    fn polynomial_roots_by_degree() {
        // Linear.
        let r = real_poly_roots(&[3.0, -1.5]).unwrap();
        assert_relative_eq!(r[0].re, 2.0, epsilon = 1e-14);

        // Quadratic with real roots 1 and 1e8 (catastrophic for the naive formula).
        let (r1, r2) = (1.0, 1e8);
        let roots = real_poly_roots(&[r1 * r2, -(r1 + r2), 1.0]).unwrap();
        let mut re: Vec<f64> = roots.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(re[0], r1, max_relative = 1e-12);
        assert_relative_eq!(re[1], r2, max_relative = 1e-12);

        // Quadratic with a complex pair: (s² + 2ζω s + ω²), ζ = 0.01, ω = 2π·50.
        let (zeta, omega) = (0.01, 2.0 * std::f64::consts::PI * 50.0);
        let roots = real_poly_roots(&[omega * omega, 2.0 * zeta * omega, 1.0]).unwrap();
        let top = roots.iter().find(|z| z.im > 0.0).unwrap();
        assert_relative_eq!(top.re, -zeta * omega, max_relative = 1e-12);
        assert_relative_eq!(top.im, omega * (1.0 - zeta * zeta).sqrt(), max_relative = 1e-12);

        // Degree 5 through the companion path: roots {-1, -2, -3, -4, -5}.
        let mut coeffs = vec![1.0];
        for root in [-1.0f64, -2.0, -3.0, -4.0, -5.0] {
            // Multiply by (s - root).
            let mut next = vec![0.0; coeffs.len() + 1];
            for (i, &c) in coeffs.iter().enumerate() {
                next[i + 1] += c;
                next[i] -= root * c;
            }
            coeffs = next;
        }
        let mut roots: Vec<f64> = real_poly_roots(&coeffs)
            .unwrap()
            .iter()
            .map(|z| z.re)
            .collect();
        roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in roots.iter().zip([-5.0, -4.0, -3.0, -2.0, -1.0]) {
            assert_relative_eq!(got, &want, max_relative = 1e-8);
        }

        assert!(real_poly_roots(&[1.0, 2.0, 0.0]).is_err());
    }

    #[test]
    fn symmetric_eigendecomposition_reconstructs_and_orders() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let b = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = &b + b.transpose();
        let (w, v) = sym_eig(&a).unwrap();
        assert!(w.as_slice().windows(2).all(|p| p[0] <= p[1]));
        let rebuilt = &v * DMatrix::from_diagonal(&w) * v.transpose();
        assert!((rebuilt - &a).norm() < 1e-12 * a.norm());
        let gram = v.transpose() * &v;
        assert!((gram - DMatrix::identity(6, 6)).norm() < 1e-13);
    }
}
