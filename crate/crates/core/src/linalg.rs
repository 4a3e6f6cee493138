//! Small numerical kernels: the constant-coefficient tridiagonal solve used
//! by the implicit diffusion step, the Dirichlet second difference and a
//! few dense-matrix helpers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Solves `T x = rhs` in place for the symmetric Toeplitz tridiagonal
/// matrix with `diag` on the diagonal and `off` on both off-diagonals
/// (Thomas algorithm). `scratch` must have the same length as `rhs`.
pub fn solve_tridiagonal_const(diag: f64, off: f64, rhs: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = rhs.len();
    if n == 0 {
        return Ok(());
    }
    debug_assert_eq!(scratch.len(), n);
    let mut denom = diag;
    if denom == 0.0 {
        return Err(Error::Numerical("singular tridiagonal system".into()));
    }
    scratch[0] = off / denom;
    rhs[0] /= denom;
    for i in 1..n {
        denom = diag - off * scratch[i - 1];
        scratch[i] = off / denom;
        rhs[i] = (rhs[i] - off * rhs[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
    if !rhs.iter().sum::<f64>().is_finite() {
        return Err(Error::Numerical("tridiagonal solve produced non-finite values".into()));
    }
    Ok(())
}

/// Dirichlet second difference `(u_{j-1} - 2u_j + u_{j+1}) / h²` on interior nodes.
pub fn laplacian_apply(u: &[f64], spacing: f64, out: &mut [f64]) {
    let n = u.len();
    let inv = 1.0 / (spacing * spacing);
    for j in 0..n {
        let left = if j > 0 { u[j - 1] } else { 0.0 };
        let right = if j + 1 < n { u[j + 1] } else { 0.0 };
        out[j] = (left - 2.0 * u[j] + right) * inv;
    }
}

/// Eigenvalue of the discrete Dirichlet Laplacian for sine mode `i`:
/// `-(2/h²)(1 - cos(π i h / l))`.
pub fn discrete_laplace_eigenvalue(i: usize, spacing: f64, length: f64) -> f64 {
    let theta = std::f64::consts::PI * i as f64 * spacing / length;
    -(2.0 / (spacing * spacing)) * (1.0 - theta.cos())
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_matches_dense_solve() {
        let n = 9;
        let (d, o) = (3.5, -1.25);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 0.3).collect();
        let mut x = b.clone();
        let mut scratch = vec![0.0; n];
        solve_tridiagonal_const(d, o, &mut x, &mut scratch).unwrap();
        for i in 0..n {
            let mut r = d * x[i];
            if i > 0 {
                r += o * x[i - 1];
            }
            if i + 1 < n {
                r += o * x[i + 1];
            }
            assert!((r - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_input_is_reported() {
        let mut x = vec![1.0, f64::NAN, 2.0];
        let mut s = vec![0.0; 3];
        assert!(solve_tridiagonal_const(2.0, -0.5, &mut x, &mut s).is_err());
    }

    #[test]
    fn discrete_laplacian_eigenpair() {
        let m = 31;
        let h = 1.0 / (m + 1) as f64;
        let u: Vec<f64> = (1..=m).map(|j| (std::f64::consts::PI * 2.0 * j as f64 * h).sin()).collect();
        let mut out = vec![0.0; m];
        laplacian_apply(&u, h, &mut out);
        let lam = discrete_laplace_eigenvalue(2, h, 1.0);
        for j in 0..m {
            assert!((out[j] - lam * u[j]).abs() < 1e-9);
        }
    }
}
