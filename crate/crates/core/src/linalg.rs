//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest singular value.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let lo = sv.min();
    if lo == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / lo
    }
}

/// `[[a, b], [c, d]]` assembled from equally tiled blocks.
pub fn block2(
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

pub fn block_diag(a: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let b = DMatrix::zeros(a.nrows(), d.ncols());
    let c = DMatrix::zeros(d.nrows(), a.ncols());
    block2(a, &b, &c, d)
}

/// Symmetric square root of a PSD matrix; tiny negative eigenvalues are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Solves `X = Q + γ·Aᵀ X A` by Smith doubling.
///
/// Requires `ρ(√γ·A) < 1`; the reported radius on failure is `ρ(A)`.
/// Terminates once the doubling increment drops to `tol` in Frobenius norm.
pub fn discounted_lyapunov(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: f64,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let radius = spectral_radius(a);
    if gamma.sqrt() * radius >= 1.0 {
        return Err(Error::UnstablePolicy { radius });
    }
    let mut x = q.clone();
    let mut power = a * gamma.sqrt();
    const MAX_DOUBLINGS: usize = 128;
    for _ in 0..MAX_DOUBLINGS {
        let incr = power.transpose() * &x * &power;
        let size = incr.norm();
        x += incr;
        if !size.is_finite() {
            break;
        }
        if size <= tol {
            return Ok(symmetrize(&x));
        }
        power = &power * &power;
    }
    Err(Error::NoConvergence {
        iterations: MAX_DOUBLINGS,
        residual: f64::NAN,
    })
}

/// Same equation solved through the Kronecker form `(I − γ Aᵀ⊗Aᵀ) vec X = vec Q`.
/// Used as an independent check of [`discounted_lyapunov`].
pub fn discounted_lyapunov_direct(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    gamma: f64,
) -> Option<DMatrix<f64>> {
    let k = a.nrows();
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = DMatrix::identity(k * k, k * k) - kron * gamma;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(k, k, sol.as_slice()))
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// Row-major nested vectors, the layout used by config files.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn doubling_matches_kronecker_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, -0.2, 0.7]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = discounted_lyapunov(&a, &q, 0.9, 1e-14).unwrap();
        let y = discounted_lyapunov_direct(&a, &q, 0.9).unwrap();
        assert_relative_eq!(x, y, epsilon = 1e-11);
        let resid = &q + a.transpose() * &x * &a * 0.9 - &x;
        assert!(resid.norm() < 1e-11);
    }

    #[test]
    fn scalar_geometric_series() {
        let a = DMatrix::from_element(1, 1, 0.7);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = discounted_lyapunov(&a, &q, 0.9, 1e-14).unwrap();
        assert_relative_eq!(x[(0, 0)], 1.0 / (1.0 - 0.9 * 0.49), epsilon = 1e-12);
    }

    #[test]
    fn rejects_discount_unstable() {
        let a = DMatrix::from_element(1, 1, 1.2);
        let q = DMatrix::from_element(1, 1, 1.0);
        match discounted_lyapunov(&a, &q, 0.9, 1e-10) {
            Err(Error::UnstablePolicy { radius }) => assert_relative_eq!(radius, 1.2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = psd_sqrt(&m);
        assert_relative_eq!(&s * &s, m, epsilon = 1e-12);
    }

    #[test]
    fn trace_product_matches_trace() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0]);
        assert_relative_eq!(trace_product(&a, &b), (&a * &b).trace(), epsilon = 1e-12);
    }
}
