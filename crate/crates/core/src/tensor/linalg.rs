use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::symmetric::checked_power;
use crate::error::{Result, StabError};

/// Default dimension cap for [`sym_eigen`].
pub const EIGEN_DIM_CAP: usize = 64;
/// Entry cap for Kronecker products and powers.
pub const KRON_ENTRY_CAP: u128 = 1_000_000;
/// Tolerated asymmetry before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Spectral decomposition of a symmetric matrix.
///
/// Eigenvalues are ascending; column `i` of `eigenvectors` pairs with
/// `eigenvalues[i]` and has its largest-magnitude entry positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymEigen {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i).iter().copied().collect()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.eigenvectors
            * DMatrix::from_diagonal(&self.eigenvalues)
            * self.eigenvectors.transpose()
    }
}

pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    sym_eigen_capped(a, EIGEN_DIM_CAP)
}

/// [`sym_eigen`] with an explicit dimension cap.
pub fn sym_eigen_capped(a: &DMatrix<f64>, cap: usize) -> Result<SymEigen> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(StabError::InvalidArgument(format!(
            "eigen decomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Err(StabError::InvalidArgument("empty matrix".into()));
    }
    if n > cap {
        return Err(StabError::SizeCap {
            requested: n as u128,
            cap: cap as u128,
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(StabError::NonFinite("matrix entry".into()));
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(StabError::NotSymmetric { asymmetry: asym });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
        eigenvectors.set_column(dst, &col);
    }
    Ok(SymEigen {
        eigenvalues,
        eigenvectors,
    })
}

/// Largest `|A_ij - A_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().min(a.ncols());
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// `v^{(x)k}`: entry `(i1..ik)` in mixed-radix order equals `v_i1 ... v_ik`.
pub fn kron_power(v: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(StabError::InvalidArgument(
            "Kronecker power needs k >= 1".into(),
        ));
    }
    checked_power(v.len(), k, KRON_ENTRY_CAP)?;
    let mut out = v.to_vec();
    for _ in 1..k {
        out = kron_vec(&out, v);
    }
    Ok(out)
}

pub(crate) fn kron_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &x in a {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}

/// Standard Kronecker product `A (x) B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = a.nrows() as u128 * b.nrows() as u128;
    let cols = a.ncols() as u128 * b.ncols() as u128;
    let entries = rows * cols;
    if entries > KRON_ENTRY_CAP {
        return Err(StabError::SizeCap {
            requested: entries,
            cap: KRON_ENTRY_CAP,
        });
    }
    Ok(a.kronecker(b))
}

/// Default relative tolerance and iteration cap for [`operator_norm`].
pub const NORM_REL_TOL: f64 = 1e-10;
pub const NORM_MAX_ITERS: usize = 10_000;

/// Largest singular value by power iteration on the smaller Gram matrix
/// (`A^T A` or `A A^T`).
pub fn operator_norm(a: &DMatrix<f64>) -> Result<f64> {
    operator_norm_with(a, NORM_REL_TOL, NORM_MAX_ITERS)
}

pub fn operator_norm_with(a: &DMatrix<f64>, rel_tol: f64, max_iters: usize) -> Result<f64> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(StabError::NonFinite("matrix entry".into()));
    }
    if a.is_empty() || a.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let gram = if a.ncols() <= a.nrows() {
        a.transpose() * a
    } else {
        a * a.transpose()
    };
    let lambda = symmetric_power_iteration(&gram, rel_tol, max_iters)?;
    Ok(lambda.max(0.0).sqrt())
}

/// Dominant eigenvalue (in magnitude) of a symmetric positive semidefinite
/// matrix by power iteration with Rayleigh-quotient convergence.
fn symmetric_power_iteration(g: &DMatrix<f64>, rel_tol: f64, max_iters: usize) -> Result<f64> {
    let n = g.nrows();
    // deterministic start vector with no special alignment
    let mut x = DVector::from_iterator(n, (0..n).map(|i| 1.0 + 0.37 * ((i * 7 + 3) % 11) as f64));
    x /= x.norm();
    let mut prev = f64::NAN;
    for _ in 0..max_iters {
        let y = g * &x;
        let lambda = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        x = y / norm;
        if prev.is_finite() && (lambda - prev).abs() <= rel_tol * lambda.abs().max(f64::MIN_POSITIVE)
        {
            // one more product for a Rayleigh quotient of the converged vector
            let y = g * &x;
            return Ok(x.dot(&y));
        }
        prev = lambda;
    }
    Err(StabError::NoConvergence {
        iterations: max_iters,
    })
}

/// Spectral radius of a symmetric matrix, `max |lambda_i|`.
pub fn symmetric_spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eigen_capped(a, usize::MAX)?;
    Ok(eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.2]);
        let e = sym_eigen(&a).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[0.2, 1.0]);
        assert_eq!(e.eigenvector(0), vec![0.0, 1.0]);
        assert_eq!(e.eigenvector(1), vec![1.0, 0.0]);
    }

    #[test]
    fn eigen_of_identity() {
        let e = sym_eigen(&DMatrix::identity(4, 4)).unwrap();
        assert!(e.eigenvalues.iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1e-9, 0.0, 1.0]);
        assert!(matches!(sym_eigen(&a), Err(StabError::NotSymmetric { .. })));
    }

    #[test]
    fn eigen_respects_cap() {
        let a = DMatrix::<f64>::identity(65, 65);
        assert!(matches!(sym_eigen(&a), Err(StabError::SizeCap { .. })));
    }

    #[test]
    fn kron_power_examples() {
        assert_eq!(kron_power(&[2.0, 3.0], 2).unwrap(), vec![4.0, 6.0, 6.0, 9.0]);
        assert_eq!(kron_power(&[1.5, -2.0, 0.1], 1).unwrap(), vec![1.5, -2.0, 0.1]);
        assert!(matches!(
            kron_power(&[1.0; 10], 7),
            Err(StabError::SizeCap { .. })
        ));
    }

    #[test]
    fn kron_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(kron(&i2, &i2).unwrap(), DMatrix::identity(4, 4));
        let a = DMatrix::from_element(1, 1, 3.0);
        let b = DMatrix::from_element(1, 1, -2.5);
        assert_eq!(kron(&a, &b).unwrap()[(0, 0)], -7.5);
    }

    #[test]
    fn norm_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -5.0]);
        assert!((operator_norm(&d).unwrap() - 5.0).abs() < 1e-9);
        let u = DVector::from_row_slice(&[1.0, 2.0, -2.0]);
        let v = DVector::from_row_slice(&[0.5, 4.0]);
        let r1 = &u * v.transpose();
        let expect = u.norm() * v.norm();
        assert!((operator_norm(&r1).unwrap() - expect).abs() < 1e-9 * expect);
        assert_eq!(operator_norm(&DMatrix::zeros(3, 2)).unwrap(), 0.0);
    }

    #[test]
    fn norm_reports_non_convergence() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.999999]);
        assert!(matches!(
            operator_norm_with(&a, 1e-16, 3),
            Err(StabError::NoConvergence { iterations: 3 })
        ));
    }
}
