//! Small dense linear-algebra helpers shared by the system, loss and
//! constants modules. Matrices here are tiny (n <= ~10), so everything is
//! dense and allocation is not a concern outside the hot loops.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Largest eigenvalue modulus of a square matrix.
///
/// 2x2 inputs use the closed-form roots of the characteristic polynomial;
/// larger inputs go through the real Schur decomposition.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(match a.nrows() {
        0 => 0.0,
        1 => a[(0, 0)].abs(),
        2 => spectral_radius_2x2(a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]),
        _ => a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max),
    })
}

#[inline]
pub(crate) fn spectral_radius_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let half_tr = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = half_tr * half_tr - det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (half_tr + s).abs().max((half_tr - s).abs())
    } else {
        // complex pair: |z|^2 = det
        det.sqrt()
    }
}

/// Induced 2-norm (largest singular value).
pub fn norm2(m: &DMatrix<f64>) -> f64 {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    if r == 1 || c == 1 {
        return m.norm();
    }
    if r == 2 && c == 2 {
        return norm2_2x2(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    }
    m.singular_values().max()
}

#[inline]
pub(crate) fn norm2_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let s = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s * s - 4.0 * det * det).max(0.0);
    (0.5 * (s + disc.sqrt())).sqrt()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue_sym(q: &DMatrix<f64>) -> f64 {
    if q.nrows() == 0 {
        return 0.0;
    }
    q.clone().symmetric_eigenvalues().max()
}

/// Symmetric positive-definite square root `S` with `S S = Q`.
pub fn sym_sqrt(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(q)?;
    let eig = q.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())
}

/// Checks that `q` is square, symmetric and strictly positive definite.
pub fn check_spd(q: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != q.ncols() {
        return Err(Error::Dimension(format!(
            "covariance must be square, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let scale = q.amax().max(1.0);
    if (q - q.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Config("covariance is not symmetric".into()));
    }
    let min_eig = q.clone().symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::Config(format!(
            "covariance is not positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// Solves the discrete Lyapunov equation `P = A P A^T + Q` for a Schur `A`.
///
/// Uses the Kronecker form `(I - A (x) A) vec P = vec Q` followed by a few
/// steps of iterative refinement.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "lyapunov: A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - a.kronecker(a);
    let lu = lhs.lu();
    let solve = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let v = nalgebra::DVector::from_column_slice(rhs.as_slice());
        let x = lu
            .solve(&v)
            .ok_or_else(|| Error::Numeric("singular Lyapunov operator".into()))?;
        Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
    };
    let mut p = solve(q)?;
    p = 0.5 * (&p + p.transpose());
    let tol = 1e-10 * q.norm().max(f64::MIN_POSITIVE);
    for _ in 0..4 {
        let resid = q - (&p - a * &p * a.transpose());
        if resid.norm() <= tol {
            return Ok(p);
        }
        let dp = solve(&resid)?;
        p += dp;
        p = 0.5 * (&p + p.transpose());
    }
    let resid = (q - (&p - a * &p * a.transpose())).norm();
    if resid <= tol {
        Ok(p)
    } else {
        Err(Error::Numeric(format!(
            "Lyapunov residual {resid:e} above tolerance {tol:e}"
        )))
    }
}

/// Stationary state covariance of `x(t+1) = A x(t) + K e(t)` with `Cov e = Q`.
pub fn stationary_covariance(
    a: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if k.nrows() != a.nrows() || k.ncols() != q.nrows() || q.nrows() != q.ncols() {
        return Err(Error::Dimension(format!(
            "stationary covariance: A {}x{}, K {}x{}, Q {}x{}",
            a.nrows(),
            a.ncols(),
            k.nrows(),
            k.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let rhs = k * q * k.transpose();
    solve_discrete_lyapunov(a, &(0.5 * (&rhs + rhs.transpose())))
}

/// Block matrix `[[a, b], [c, d]]`.
pub fn block2x2(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (r1, c1) = a.shape();
    let (r2, c2) = d.shape();
    let mut out = DMatrix::zeros(r1 + r2, c1 + c2);
    out.view_mut((0, 0), (r1, c1)).copy_from(a);
    out.view_mut((0, c1), (r1, c2)).copy_from(b);
    out.view_mut((r1, 0), (r2, c1)).copy_from(c);
    out.view_mut((r1, c1), (r2, c2)).copy_from(d);
    out
}
