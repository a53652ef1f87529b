//! Small dense symmetric-matrix helpers shared across the crate.
//!
//! Latent and channel dimensions are tiny (a handful of coordinates), so the
//! per-row hot paths use plain triangular solves on precomputed Cholesky
//! factors instead of a LAPACK call per row. Eigen-decompositions and the
//! large SVDs go through LAPACK.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};

use crate::error::{Error, Result};

/// Hand-rolled Cholesky of a symmetric positive definite matrix.
/// Returns the lower factor, or `None` if a pivot is not strictly positive.
pub fn cholesky_lower(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Cholesky with a jitter ladder: retry with `scale * trace/n` added to the
/// diagonal, escalating by 10x a few times before giving up.
pub fn cholesky_jittered(a: &Array2<f64>, base_jitter: f64) -> Result<Array2<f64>> {
    if let Some(l) = cholesky_lower(a) {
        return Ok(l);
    }
    let n = a.nrows();
    let scale = (a.diag().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = base_jitter * scale;
    for _ in 0..6 {
        let mut b = a.clone();
        for i in 0..n {
            b[[i, i]] += jitter;
        }
        if let Some(l) = cholesky_lower(&b) {
            return Ok(l);
        }
        jitter *= 10.0;
    }
    Err(Error::Linalg(format!(
        "matrix is not positive definite ({}x{}, trace {:.3e})",
        n,
        n,
        a.diag().sum()
    )))
}

/// Solve `L x = b` in place (forward substitution, `L` lower triangular).
pub fn solve_lower_inplace(l: &Array2<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * b[k];
        }
        b[i] = s / l[[i, i]];
    }
}

/// Solve `L^T x = b` in place (back substitution).
pub fn solve_lower_t_inplace(l: &Array2<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[[k, i]] * b[k];
        }
        b[i] = s / l[[i, i]];
    }
}

/// Solve `(L L^T) x = b` given the lower Cholesky factor.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut x = b.to_vec();
    solve_lower_inplace(l, &mut x);
    solve_lower_t_inplace(l, &mut x);
    Array1::from_vec(x)
}

/// log|A| from the lower Cholesky factor of A.
pub fn log_det_from_chol(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Symmetric eigendecomposition, eigenvalues ascending.
pub fn sym_eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let sym = symmetrize(a);
    sym.eigh(UPLO::Lower)
        .map_err(|e| Error::Linalg(format!("eigh failed: {e}")))
}

/// 0.5 (A + A^T).
pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    0.5 * (a + &a.t())
}

/// Largest absolute asymmetry |A - A^T|.
pub fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..i {
            m = m.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    m
}

/// Apply `f` to the eigenvalues of a symmetric matrix.
pub fn sym_eig_map(a: &Array2<f64>, f: impl Fn(f64) -> f64) -> Result<Array2<f64>> {
    let (vals, vecs) = sym_eigh(a)?;
    let n = a.nrows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let fv = f(vals[j]);
        for i in 0..n {
            scaled[[i, j]] *= fv;
        }
    }
    Ok(scaled.dot(&vecs.t()))
}

/// Symmetric square root, flooring eigenvalues at `floor` first.
pub fn sym_sqrt(a: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    sym_eig_map(a, |v| v.max(floor).sqrt())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn sym_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky_jittered(a, 1e-12)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        solve_lower_inplace(&l, &mut e);
        solve_lower_t_inplace(&l, &mut e);
        for i in 0..n {
            inv[[i, j]] = e[i];
        }
    }
    Ok(symmetrize(&inv))
}

/// Moore-Penrose pseudo-inverse of a general matrix (via eigh of the Gram
/// matrix on the smaller side; dimensions here are small).
pub fn pinv(a: &Array2<f64>, rcond: f64) -> Result<Array2<f64>> {
    let (n, m) = (a.nrows(), a.ncols());
    if m <= n {
        // A^+ = (A^T A)^+ A^T
        let g = a.t().dot(a);
        let (vals, vecs) = sym_eigh(&g)?;
        let vmax = vals.iter().cloned().fold(0.0f64, f64::max);
        let cut = rcond * vmax.max(f64::MIN_POSITIVE);
        let mut w = vecs.clone();
        for j in 0..m {
            let inv = if vals[j] > cut { 1.0 / vals[j] } else { 0.0 };
            for i in 0..m {
                w[[i, j]] *= inv;
            }
        }
        Ok(w.dot(&vecs.t()).dot(&a.t()))
    } else {
        let t = pinv(&a.t().to_owned(), rcond)?;
        Ok(t.t().to_owned())
    }
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> Result<f64> {
    let (vals, _) = sym_eigh(a)?;
    Ok(vals[0])
}
