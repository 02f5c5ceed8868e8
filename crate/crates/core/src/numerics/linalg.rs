//! Small dense `f64` routines used by GPTQ and explicit-transform inversion.
//! Matrices are square, row-major `Vec<f64>` of side `n`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// In-place lower Cholesky factor `L` with `A = L·Lᵀ`; upper triangle zeroed.
/// Returns `None` if `A` is not numerically positive definite.
pub fn cholesky_lower(a: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    Some(())
}

/// Inverse of an SPD matrix from its lower Cholesky factor.
pub fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
    let mut linv = vec![0.0; n * n];
    for c in 0..n {
        for r in c..n {
            let mut s = if r == c { 1.0 } else { 0.0 };
            for k in c..r {
                s -= l[r * n + k] * linv[k * n + c];
            }
            linv[r * n + c] = s / l[r * n + r];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

/// Upper Cholesky factor `U` with `A = Uᵀ·U`.
pub fn cholesky_upper(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky_lower(&mut l, n)?;
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            u[i * n + j] = l[j * n + i];
        }
    }
    Some(u)
}

fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// General inverse by Gauss–Jordan elimination with partial pivoting.
///
/// Fails with [`Error::IllConditioned`] when the 1-norm condition estimate
/// `‖A‖₁·‖A⁻¹‖₁` exceeds `max_condition` or a pivot vanishes.
pub fn invert(a: &[f64], n: usize, max_condition: f64) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap_or(col);
        let p = m[pivot * n + col];
        if p == 0.0 || !p.is_finite() {
            return Err(Error::IllConditioned {
                condition: f64::INFINITY,
            });
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= f * m[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    let condition = norm1(a, n) * norm1(&inv, n);
    if !(condition <= max_condition) {
        return Err(Error::IllConditioned { condition });
    }
    Ok(inv)
}
