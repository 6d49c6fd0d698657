//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn sym_part<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    let eig = m.clone().symmetric_eigen();
    let mut vals: Vec<T> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals
}

/// Smallest eigenvalue of a symmetric matrix with a unit eigenvector.
pub fn sym_min_eigenpair<T: Real>(m: &DMatrix<T>) -> (T, DVector<T>) {
    let eig = m.clone().symmetric_eigen();
    let (idx, val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, eig.eigenvalues[0]), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    (val, eig.eigenvectors.column(idx).into_owned())
}

/// Largest singular value (operator 2-norm).
pub fn op_norm<T: Real>(m: &DMatrix<T>) -> T {
    m.clone().singular_values().iter().copied().fold(T::zero(), |a, b| a.max(b))
}

/// Operator 2-norm of the inverse, 1 / sigma_min.
pub fn inverse_op_norm<T: Real>(m: &DMatrix<T>) -> T {
    let smin = m
        .clone()
        .singular_values()
        .iter()
        .copied()
        .fold(T::lit(f64::INFINITY), |a, b| a.min(b));
    T::one() / smin
}

pub fn solve<T: Real>(m: &DMatrix<T>, b: &DVector<T>, what: &'static str) -> Result<DVector<T>> {
    m.clone().lu().solve(b).ok_or(Error::SingularMatrix(what))
}

pub fn inverse<T: Real>(m: &DMatrix<T>, what: &'static str) -> Result<DMatrix<T>> {
    m.clone().try_inverse().ok_or(Error::SingularMatrix(what))
}

/// Minimum-norm least-squares solve; singular values below `rtol * sigma_max`
/// are discarded.
pub fn pinv_solve<T: Real>(m: &DMatrix<T>, b: &DVector<T>, rtol: T) -> DVector<T> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |a, c| a.max(c));
    let cut = smax * rtol;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut coef = u.transpose() * b;
    for (c, &s) in coef.iter_mut().zip(svd.singular_values.iter()) {
        *c = if s > cut { *c / s } else { T::zero() };
    }
    vt.transpose() * coef
}

pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    (m - m.transpose()).amax()
}
