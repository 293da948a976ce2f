//! Dense linear-algebra building blocks.
//!
//! Everything above this module talks in terms of [`Matrix`] and the handful
//! of semantic operations here. Storage, products, QR and symmetric
//! eigendecompositions come from `nalgebra`; the SVD is a one-sided Jacobi
//! iteration, which stays accurate on rank-deficient inputs.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Result, TcmfError};

/// Dense real matrix. Storage order is the backend's business.
pub type Matrix = DMatrix<f64>;

/// Relative rank cutoff used by [`projection_onto`].
pub const RANK_TOL: f64 = 1e-12;

/// Thin singular value decomposition `u * diag(sigma) * v^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Largest absolute entry (the entrywise infinity norm). Zero for empty matrices.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Sum of squared entries.
pub fn frob_sq(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Top-`k` singular triplets of `m`.
///
/// Singular values come back sorted nonincreasing. Each column of `u` is
/// flipped so its largest-magnitude entry is positive (the matching column
/// of `v` is flipped with it), which makes the output reproducible.
pub fn truncated_svd(m: &Matrix, k: usize) -> Result<ThinSvd> {
    let (n, p) = m.shape();
    let full = n.min(p);
    if k == 0 || k > full {
        return Err(TcmfError::dim(format!(
            "truncated_svd: k={k} out of range for a {n}x{p} matrix"
        )));
    }
    if !all_finite(m) {
        return Err(TcmfError::dim("truncated_svd: non-finite entries"));
    }

    // Jacobi works on columns, so a wide matrix is decomposed via its transpose.
    let wide = p > n;
    let work = if wide { m.transpose() } else { m.clone() };
    let (left, singular_values, right) = jacobi_svd(work);
    let (u_full, v_full) = if wide { (right, left) } else { (left, right) };
    let mut order: Vec<usize> = (0..full).collect();
    order.sort_by(|&a, &b| singular_values[b].total_cmp(&singular_values[a]));

    let mut u = Matrix::zeros(n, k);
    let mut v = Matrix::zeros(p, k);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        let mut ucol = u_full.column(src).clone_owned();
        let mut vcol = v_full.column(src).clone_owned();
        let pivot = ucol.iter().copied().fold(
            0.0_f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.set_column(dst, &ucol);
        v.set_column(dst, &vcol);
        sigma.push(singular_values[src]);
    }
    // columns with (near) zero singular values carry no direction of their own
    let u = orthonormalize_against(&u, &Matrix::zeros(n, 0));
    Ok(ThinSvd { u, sigma, v })
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi SVD of a tall matrix `a` (rows ≥ cols).
///
/// Returns `(U, sigma, V)` unsorted, with `a = U diag(sigma) Vᵀ`. Columns of `U`
/// belonging to zero singular values are left at zero.
fn jacobi_svd(mut a: Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (rows, cols) = a.shape();
    let mut v = Matrix::identity(cols, cols);
    let tol = f64::EPSILON * rows as f64;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let alpha = a.column(i).norm_squared();
                let beta = a.column(j).norm_squared();
                let gamma = a.column(i).dot(&a.column(j));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = Vec::with_capacity(cols);
    for j in 0..cols {
        let norm = a.column(j).norm();
        sigma.push(norm);
        if norm > 0.0 {
            a.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    (a, sigma, v)
}

fn rotate_columns(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let x = m[(r, i)];
        let y = m[(r, j)];
        m[(r, i)] = c * x - s * y;
        m[(r, j)] = s * x + c * y;
    }
}

/// Orthonormalizes the columns of `cand` against the orthonormal `basis` and
/// against each other, in order (two rounds of Gram-Schmidt). A column that
/// collapses is replaced by the first standard basis vector that survives.
pub fn orthonormalize_against(cand: &Matrix, basis: &Matrix) -> Matrix {
    let n = cand.nrows();
    let mut out = Matrix::zeros(n, cand.ncols());
    let mut fallback = 0usize;
    let project = |v: &mut nalgebra::DVector<f64>, out: &Matrix, done: usize| {
        for _ in 0..2 {
            for b in basis.column_iter() {
                let d = b.dot(v);
                v.axpy(-d, &b, 1.0);
            }
            for k in 0..done {
                let col = out.column(k);
                let d = col.dot(v);
                v.axpy(-d, &col, 1.0);
            }
        }
    };
    for c in 0..cand.ncols() {
        let mut v = cand.column(c).clone_owned();
        let scale = v.norm().max(1.0);
        project(&mut v, &out, c);
        while v.norm() <= 1e-10 * scale && fallback < n {
            v = nalgebra::DVector::zeros(n);
            v[fallback] = 1.0;
            fallback += 1;
            project(&mut v, &out, c);
        }
        let norm = v.norm();
        if norm > 0.0 {
            out.set_column(c, &(v / norm));
        }
    }
    out
}

/// Best rank-`k` approximation of `m`; `k == 0` gives the zero matrix.
pub fn low_rank_approx(m: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Ok(Matrix::zeros(m.nrows(), m.ncols()));
    }
    Ok(truncated_svd(m, k)?.reconstruct())
}

/// Orthogonal projector `U (U^T U)^{-1} U^T` onto the column space of `u`.
pub fn projection_onto(u: &Matrix) -> Result<Matrix> {
    let (n, r) = u.shape();
    if r == 0 {
        return Ok(Matrix::zeros(n, n));
    }
    if r > n {
        return Err(TcmfError::singular(format!(
            "projection_onto: {n}x{r} cannot have full column rank"
        )));
    }
    let svd = truncated_svd(u, r)?;
    let largest = svd.sigma[0];
    let smallest = svd.sigma[r - 1];
    if largest == 0.0 || smallest <= RANK_TOL * largest {
        return Err(TcmfError::singular(format!(
            "projection_onto: rank deficient (sigma_min={smallest:e}, sigma_max={largest:e})"
        )));
    }
    let p = &svd.u * svd.u.transpose();
    Ok(symmetrize(&p))
}

/// Symmetric inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let (n, m) = a.shape();
    if n != m {
        return Err(TcmfError::dim(format!(
            "inv_sqrt_psd: {n}x{m} is not square"
        )));
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let asym = max_abs(&(a - a.transpose()));
    if asym >= 1e-10 * max_abs(a).max(1.0) {
        return Err(TcmfError::singular(format!(
            "inv_sqrt_psd: input not symmetric (asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let min_eig = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(min_eig > 1e-12) {
        return Err(TcmfError::singular(format!(
            "inv_sqrt_psd: not positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / lam.sqrt());
    }
    Ok(symmetrize(&(scaled * q.transpose())))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue_sym(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Orthonormal basis of the column space of a full-column-rank `a` via QR,
/// with column signs fixed so that `R` has a nonnegative diagonal.
/// Returns `(Q, R)` with `a = Q R`.
pub fn qr_thin(a: &Matrix) -> (Matrix, Matrix) {
    let (n, r) = a.shape();
    if r == 0 {
        return (Matrix::zeros(n, 0), Matrix::zeros(0, 0));
    }
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut rm = qr.r();
    for j in 0..rm.nrows() {
        if rm[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            rm.row_mut(j).neg_mut();
        }
    }
    (q, rm)
}

/// Remove the component of `a` lying in the column space of the orthonormal `basis`.
pub fn deflate(a: &Matrix, basis: &Matrix) -> Matrix {
    if basis.ncols() == 0 {
        return a.clone();
    }
    a - basis * (basis.transpose() * a)
}

/// `‖AᵀA − I‖∞`, the departure of `a` from orthonormal columns.
pub fn gram_deviation(a: &Matrix) -> f64 {
    let r = a.ncols();
    max_abs(&(a.transpose() * a - Matrix::identity(r, r)))
}

/// Column-wise concatenation `[m_1, m_2, ...]` of matrices sharing a row count.
pub fn hconcat(parts: &[Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |m| m.nrows());
    if parts.iter().any(|m| m.nrows() != rows) {
        return Err(TcmfError::dim("hconcat: row counts differ"));
    }
    let cols: usize = parts.iter().map(|m| m.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for m in parts {
        out.columns_mut(at, m.ncols()).copy_from(m);
        at += m.ncols();
    }
    Ok(out)
}
