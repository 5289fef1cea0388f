//! Dense eigenvalue and rank helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, Schur};
use thiserror::Error;

pub type C64 = Complex<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("eigenvalue iteration did not converge on a {0}x{0} matrix")]
    NoConvergence(usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
}

const SCHUR_ITERS_PER_DIM: usize = 1000;

/// Parlett-Reinsch balancing by powers of two. The result is similar to `m`.
pub fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    const RADIX: f64 = 2.0;
    let n = m.nrows();
    let mut b = m.clone();
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += b[(j, i)].abs();
                    r += b[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            while c < r / RADIX {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            while c > r * RADIX {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                for j in 0..n {
                    b[(i, j)] /= f;
                    b[(j, i)] *= f;
                }
            }
        }
    }
    b
}

fn check_square<T>(m: &DMatrix<T>) -> Result<(), LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare(m.nrows(), m.ncols()));
    }
    Ok(())
}

/// Eigenvalues of a real matrix (balanced, then real Schur / QR iteration).
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<C64>, LinalgError> {
    check_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![C64::new(m[(0, 0)], 0.0)]);
    }
    let b = balance(m);
    let schur = Schur::try_new(b, f64::EPSILON, SCHUR_ITERS_PER_DIM * n)
        .ok_or(LinalgError::NoConvergence(n))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// Eigenvalues of a complex matrix (complex Schur form diagonal).
pub fn complex_eigenvalues(m: &DMatrix<C64>) -> Result<Vec<C64>, LinalgError> {
    check_square(m)?;
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![m[(0, 0)]]);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_ITERS_PER_DIM * n)
        .ok_or(LinalgError::NoConvergence(n))?;
    let (_, t) = schur.unpack();
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

/// Smallest real part over the spectrum.
pub fn min_real_part(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|l| l.re)
        .fold(f64::INFINITY, f64::min))
}

/// Largest real part over the spectrum (spectral abscissa).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

/// Numerical rank: number of singular values above `tol`.
pub fn complex_rank(m: &DMatrix<C64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|s| **s > tol)
        .count()
}
