//! Dense symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Patch covariance matrices are at most 432×432, so the O(d³) per-sweep
//! cost is negligible and the method is easy to check against its own
//! reconstruction.

use ndarray::Array2;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-8;
pub const NEGATIVE_EIGENVALUE_TOL: f64 = 1e-8;

/// Eigenvalues sorted descending and the matching orthonormal eigenvectors
/// as columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Array2<f64>,
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn is_symmetric(a: &Array2<f64>, tol: f64) -> bool {
    let n = a.nrows();
    if n != a.ncols() {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// One Jacobi rotation zeroing `a[p, q]`, applied to `a` and accumulated
/// into `v`.
fn rotate(a: &mut Array2<f64>, v: &mut Array2<f64>, p: usize, q: usize) {
    let apq = a[[p, q]];
    if apq == 0.0 {
        return;
    }
    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
    // stable tangent of the rotation angle
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        1.0 / (theta - (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = a.nrows();
    for k in 0..n {
        let akp = a[[k, p]];
        let akq = a[[k, q]];
        a[[k, p]] = c * akp - s * akq;
        a[[k, q]] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[[p, k]];
        let aqk = a[[q, k]];
        a[[p, k]] = c * apk - s * aqk;
        a[[q, k]] = s * apk + c * aqk;
    }
    a[[p, q]] = 0.0;
    a[[q, p]] = 0.0;
    for k in 0..n {
        let vkp = v[[k, p]];
        let vkq = v[[k, q]];
        v[[k, p]] = c * vkp - s * vkq;
        v[[k, q]] = s * vkp + c * vkq;
    }
}

/// Full eigendecomposition of a symmetric matrix. Eigenvalues come out
/// sorted descending. Use [`EigenDecomposition::clamp_nonnegative`] when the
/// input is a covariance matrix that should be numerically PSD.
pub fn symmetric_eigendecomposition(s: &Array2<f64>) -> Result<EigenDecomposition> {
    let n = s.nrows();
    if n == 0 || n != s.ncols() {
        return Err(Error::Dimension(format!(
            "expected square nonempty matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = max_abs(s).max(1.0);
    if !is_symmetric(s, SYMMETRY_TOL * scale) {
        return Err(Error::InvalidArgument(
            "matrix is not symmetric within tolerance".into(),
        ));
    }

    let mut a = s.clone();
    let mut v = Array2::eye(n);
    let target = OFF_DIAGONAL_TOL * frobenius_norm(s).max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > target {
        return Err(Error::Numerical(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(a[[src, src]]);
        for k in 0..n {
            eigenvectors[[k, dst]] = v[[k, src]];
        }
    }

    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

impl EigenDecomposition {
    /// Clamp tiny negative eigenvalues (above −1e-8·λ₁) to zero; anything
    /// more negative means the input was not actually PSD and is an error.
    pub fn clamp_nonnegative(mut self) -> Result<Self> {
        let lambda_max = self.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
        for ev in self.eigenvalues.iter_mut() {
            if *ev < 0.0 {
                if *ev < -NEGATIVE_EIGENVALUE_TOL * lambda_max.max(1e-300) {
                    return Err(Error::Numerical(format!(
                        "eigenvalue {ev} is negative beyond tolerance"
                    )));
                }
                *ev = 0.0;
            }
        }
        Ok(self)
    }

    /// Q·diag(f(λ))·Qᵀ for an elementwise spectral function.
    pub fn apply_spectral(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let n = self.eigenvalues.len();
        let mut scaled = Array2::zeros((n, n));
        for (j, &ev) in self.eigenvalues.iter().enumerate() {
            let fv = f(ev);
            for i in 0..n {
                scaled[[i, j]] = self.eigenvectors[[i, j]] * fv;
            }
        }
        scaled.dot(&self.eigenvectors.t())
    }
}
