//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative singular-value threshold used by every rank decision.
pub const RANK_RTOL: f64 = 1e-10;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITERS: usize = 10_000;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    let m = max_abs(a);
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * a.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn mat_vec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += a[(i, j)] * xj;
        }
    }
    out
}

pub fn mat_t_vec(a: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), y.len());
    (0..a.ncols())
        .map(|j| a.column(j).iter().zip(y).map(|(aij, yi)| aij * yi).sum())
        .collect()
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let svd = SVD::try_new(a.clone(), false, false, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Numerical("SVD failed to converge".into()))?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Thin SVD `a = u diag(s) v^T` with descending singular values.
///
/// Built from the eigendecomposition of the smaller Gram matrix: nalgebra's
/// bidiagonal SVD can return inconsistent singular vectors for matrices with
/// exactly zero singular values (e.g. the all-ones matrix). Columns of the
/// left factor that belong to negligible singular values are zero.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if a.nrows() < a.ncols() {
        let (v, s, u) = thin_svd(&a.transpose())?;
        return Ok((u, s, v));
    }
    let k = a.ncols();
    let (_, vecs) = sym_eigen(&(a.transpose() * a))?;
    let mut v = DMatrix::zeros(k, k);
    for j in 0..k {
        v.set_column(j, &vecs.column(k - 1 - j));
    }
    let av = a * &v;
    let s: Vec<f64> = (0..k).map(|j| av.column(j).norm()).collect();
    let top = s.iter().copied().fold(0.0_f64, f64::max);
    let mut u = DMatrix::zeros(a.nrows(), k);
    for (j, &sj) in s.iter().enumerate() {
        if sj > f64::EPSILON * top * k as f64 {
            u.set_column(j, &(av.column(j) / sj));
        }
    }
    Ok((u, s, v))
}

/// Numerical rank under the relative threshold `RANK_RTOL * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> Result<usize> {
    let s = singular_values(a)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > RANK_RTOL * top).count())
}

/// Fails with `Error::Rank` unless `Ker a = {0}`.
pub fn require_full_column_rank(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() < a.ncols() {
        return Err(Error::Rank(format!(
            "{what}: {}x{} matrix cannot have trivial kernel",
            a.nrows(),
            a.ncols()
        )));
    }
    let r = numerical_rank(a)?;
    if r < a.ncols() {
        return Err(Error::Rank(format!(
            "{what}: numerical rank {r} < {} columns",
            a.ncols()
        )));
    }
    Ok(())
}

/// Fails with `Error::Rank` unless `a` maps onto its codomain.
pub fn require_full_row_rank(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() > a.ncols() {
        return Err(Error::Rank(format!(
            "{what}: {}x{} matrix cannot be onto",
            a.nrows(),
            a.ncols()
        )));
    }
    let r = numerical_rank(a)?;
    if r < a.nrows() {
        return Err(Error::Rank(format!(
            "{what}: numerical rank {r} < {} rows",
            a.nrows()
        )));
    }
    Ok(())
}

pub fn is_symmetric(a: &DMatrix<f64>, rtol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rtol * scale))
}

/// Eigenvalues (ascending) and eigenvectors of a symmetric matrix.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, SVD_EPS, SVD_MAX_ITERS)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver failed to converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(a.nrows(), a.ncols());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Symmetric PSD square root; eigenvalues are clamped at zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen(a)?;
    let roots = DVector::from_iterator(values.len(), values.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&vectors * DMatrix::from_diagonal(&roots) * vectors.transpose())
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> Result<f64> {
    let (values, _) = sym_eigen(a)?;
    Ok(values.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Moore-Penrose pseudo-inverse `pᵀ(ppᵀ)⁻¹` of a full-row-rank matrix and an
/// orthonormal basis of its null space (columns, from the eigenvectors of
/// `pᵀp` with the smallest eigenvalues).
pub fn pinv_and_nullspace(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (rows, cols) = p.shape();
    require_full_row_rank(p, "onto map")?;
    let gram = p * p.transpose();
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Numerical("Gram matrix of onto map is not positive definite".into())
    })?;
    let pinv = p.transpose() * chol.inverse();
    let (_, vecs) = sym_eigen(&(p.transpose() * p))?;
    let null = vecs.columns(0, cols - rows).into_owned();
    Ok((pinv, null))
}
