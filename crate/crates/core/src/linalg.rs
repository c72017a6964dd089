//! Small dense linear algebra helpers over `Vec<f64>` plus the symmetric
//! eigendecomposition utilities used for covariance square roots and
//! pseudo-inverses.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Symmetric eigendecomposition with a relative floor: eigenvalues below
/// `tol * max(|lambda|)` are treated as zero.
pub struct SymEigen {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SymEigen> {
    if m.nrows() != m.ncols() {
        return Err(Error::domain("matrix must be square"));
    }
    // Symmetrise first so tiny asymmetries from accumulation do not leak in.
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok(SymEigen {
        vectors: eig.eigenvectors,
        values: eig.eigenvalues,
    })
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let e = sym_eigen(m)?;
    Ok(e.values.iter().cloned().fold(f64::INFINITY, f64::min))
}

fn rebuild(e: &SymEigen, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let n = e.values.len();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = f(e.values[i]);
    }
    &e.vectors * d * e.vectors.transpose()
}

/// PSD square root with eigenvalues below `rel_tol * max` clamped to zero.
/// Fails if an eigenvalue is more negative than `neg_tol`.
pub fn sym_sqrt_psd(m: &DMatrix<f64>, rel_tol: f64, neg_tol: f64) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m)?;
    let max = e.values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let min = e.values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -neg_tol.max(rel_tol * max) {
        return Err(Error::domain(format!(
            "matrix is not positive semi-definite (min eigenvalue {min:.3e})"
        )));
    }
    let floor = rel_tol * max;
    Ok(rebuild(&e, |l| if l > floor { l.sqrt() } else { 0.0 }))
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn pinv_psd(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let e = sym_eigen(m)?;
    let max = e.values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let floor = rel_tol * max;
    Ok(rebuild(&e, |l| if l > floor { 1.0 / l } else { 0.0 }))
}

pub fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let dv = DVector::from_column_slice(v);
    (m * dv).iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_and_pinv_on_diagonal() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 0.0]));
        let s = sym_sqrt_psd(&g, 1e-12, 1e-10).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((s[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(s[(2, 2)].abs() < 1e-12);
        let p = pinv_psd(&g, 1e-12).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-12);
        assert!(p[(2, 2)].abs() < 1e-12);
    }

    #[test]
    fn negative_matrix_rejected() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(sym_sqrt_psd(&g, 1e-12, 1e-10).is_err());
    }
}
