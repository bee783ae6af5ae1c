//! Dense linear-algebra kernels shared by the system, norm and synthesis code.
//!
//! Everything here is a pure function of its arguments. Matrices are
//! `nalgebra::DMatrix<f64>`; frequency-domain work uses `DMatrix<Complex64>`.

use nalgebra::linalg::Schur;
use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Condition estimate above which a linear solve is declared singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

const SCHUR_EPS: f64 = 1e-15;
const SCHUR_MAX_ITER: usize = 100_000;

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn require_square<T: nalgebra::Scalar>(m: &DMatrix<T>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Real Schur decomposition `m = q t qᵀ` with `t` upper quasi-triangular.
pub fn real_schur(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    require_square(m, "matrix")?;
    check_finite(m, "matrix")?;
    if let Some(schur) = Schur::try_new(m.clone(), SCHUR_EPS, SCHUR_MAX_ITER) {
        return Ok(schur.unpack());
    }
    // QR stalls on a few structured inputs; a fixed Householder similarity
    // with a looser deflation threshold breaks the symmetry.
    let n = m.nrows();
    let v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt());
    let h = DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / v.norm_squared());
    for eps in [1e-14, 1e-13] {
        if let Some(schur) = Schur::try_new(&h * m * &h, eps, SCHUR_MAX_ITER) {
            let (q, t) = schur.unpack();
            return Ok((&h * q, t));
        }
    }
    Err(Error::Numerical("Schur iteration did not converge".into()))
}

/// All eigenvalues of a square real matrix, with multiplicity.
///
/// Complex eigenvalues come out of the 2x2 blocks of the real Schur form,
/// so conjugate pairs are exact conjugates.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let n = require_square(m, "matrix")?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let (_, t) = real_schur(m)?;
    Ok(quasi_triangular_eigenvalues(&t))
}

fn quasi_triangular_eigenvalues(t: &DMatrix<f64>) -> Vec<Complex64> {
    let n = t.nrows();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            let (a, b, c, d) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let mean = 0.5 * (a + d);
            let disc = 0.25 * (a - d) * (a - d) + b * c;
            if disc < 0.0 {
                let im = (-disc).sqrt();
                out.push(Complex64::new(mean, im));
                out.push(Complex64::new(mean, -im));
            } else {
                let r = disc.sqrt();
                out.push(Complex64::new(mean + r, 0.0));
                out.push(Complex64::new(mean - r, 0.0));
            }
            i += 2;
        } else {
            out.push(Complex64::new(t[(i, i)], 0.0));
            i += 1;
        }
    }
    out
}

/// Largest real part over the eigenvalues of `m`.
pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let eig = eigenvalues(m)?;
    if eig.is_empty() {
        return Err(Error::Domain("spectral abscissa of an empty matrix".into()));
    }
    Ok(eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Largest singular value; 0 for empty or zero matrices.
pub fn max_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Largest singular value of a complex matrix.
pub fn max_singular_value_complex(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    }
    if m.nrows() == 2 && m.ncols() == 2 {
        // closed form from the 2x2 Gram matrix
        let g = m.adjoint() * m;
        let tr = g[(0, 0)].re + g[(1, 1)].re;
        let det = (g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)]).re;
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        return (0.5 * tr + disc).max(0.0).sqrt();
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

fn norm1<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.clone().modulus()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solve `a x = b` and return the 1-norm condition number of `a` with it.
///
/// The condition number is exact, computed from the explicit inverse; the
/// matrices handled here are small. An exactly singular `a` yields
/// `Error::Singular(inf)`.
pub fn solve_with_condition<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<(DMatrix<T>, f64)>
where
    T: ComplexField<RealField = f64>,
{
    let n = require_square(a, "coefficient matrix")?;
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, expected {n}",
            b.nrows()
        )));
    }
    if n == 0 {
        return Ok((DMatrix::zeros(0, b.ncols()), 1.0));
    }
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::Singular(f64::INFINITY))?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() {
        return Err(Error::Singular(f64::INFINITY));
    }
    let x = lu.solve(b).ok_or(Error::Singular(f64::INFINITY))?;
    Ok((x, cond))
}

/// Solve `a x = b`, rejecting `a` with condition number above [`SINGULAR_CONDITION`].
pub fn solve_linear_generic<T>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64>,
{
    let (x, cond) = solve_with_condition(a, b)?;
    if cond > SINGULAR_CONDITION {
        return Err(Error::Singular(cond));
    }
    Ok(x)
}

/// Solve `a x = b` for real matrices.
pub fn solve_linear(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(a, "coefficient matrix")?;
    check_finite(b, "right-hand side")?;
    solve_linear_generic(a, b)
}

/// Solve `a x = b` for complex matrices (frequency-response kernels).
pub fn solve_linear_complex(
    a: &DMatrix<Complex64>,
    b: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>> {
    solve_linear_generic(a, b)
}

/// Solve the continuous Lyapunov equation `a p + p aᵀ + q = 0`.
///
/// Bartels-Stewart on the real Schur form of `a`: the transformed equation
/// is swept block by block from the bottom-right corner, each 1x1/2x2
/// block pair giving a Sylvester system of order at most 4.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(a, "state matrix")?;
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(format!(
            "q is {}x{}, expected {n}x{n}",
            q.nrows(),
            q.ncols()
        )));
    }
    check_finite(q, "q")?;
    let qscale = q.amax().max(1.0);
    if (q - q.transpose()).amax() > 1e-12 * qscale {
        return Err(Error::Domain("q is not symmetric".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (u, t) = real_schur(a)?;
    let abscissa = quasi_triangular_eigenvalues(&t)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if abscissa >= 0.0 {
        return Err(Error::Unstable(abscissa));
    }

    // t x + x tᵀ = -c with c = uᵀ q u
    let c = u.transpose() * q * &u;
    let blocks = diagonal_blocks(&t);
    let mut x = DMatrix::<f64>::zeros(n, n);
    for bi in (0..blocks.len()).rev() {
        let (i0, si) = blocks[bi];
        for bj in (0..blocks.len()).rev() {
            let (j0, sj) = blocks[bj];
            let mut rhs = -c.view((i0, j0), (si, sj)).into_owned();
            let below = i0 + si;
            if below < n {
                rhs -= t.view((i0, below), (si, n - below)) * x.view((below, j0), (n - below, sj));
            }
            let right = j0 + sj;
            if right < n {
                rhs -= x.view((i0, right), (si, n - right))
                    * t.view((j0, right), (sj, n - right)).transpose();
            }
            let tii = t.view((i0, i0), (si, si)).into_owned();
            let tjj = t.view((j0, j0), (sj, sj)).into_owned();
            let block = small_sylvester(&tii, &tjj, &rhs)?;
            x.view_mut((i0, j0), (si, sj)).copy_from(&block);
        }
    }
    let p = &u * x * u.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

fn diagonal_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Solve `a x + x bᵀ = r` for blocks of order 1 or 2 via the Kronecker form.
fn small_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, k) = (a.nrows(), b.nrows());
    let dim = m * k;
    // column-major vec: vec(a x) = (I ⊗ a) vec x, vec(x bᵀ) = (b ⊗ I) vec x
    let mut sys = DMatrix::<f64>::zeros(dim, dim);
    for col in 0..k {
        for row in 0..m {
            let eq = col * m + row;
            for l in 0..m {
                sys[(eq, col * m + l)] += a[(row, l)];
            }
            for l in 0..k {
                sys[(eq, l * m + row)] += b[(col, l)];
            }
        }
    }
    let rhs = DMatrix::from_column_slice(dim, 1, r.as_slice());
    let v = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Sylvester block in Lyapunov solve".into()))?;
    Ok(DMatrix::from_column_slice(m, k, v.as_slice()))
}
