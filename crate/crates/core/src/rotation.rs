//! Hadamard and general orthogonal transforms, and equivalent linear
//! transformations `Y = X·W = (X·A)·(A⁻¹·W)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{linalg, Rng, Tensor};

/// Tolerance used when accepting a user-supplied orthogonal matrix stored in `f32`.
pub const EXPLICIT_ORTHOGONALITY_TOL: f64 = 1e-5;
/// Condition-number ceiling for inverting an explicit, non-orthogonal transform.
pub const MAX_CONDITION: f64 = 1e6;

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Normalised fast Walsh–Hadamard transform of one row, in place.
///
/// Computes `x · H / √n` with the Sylvester-ordered `H`, which is symmetric,
/// so the normalised transform is its own inverse.
pub fn fwht_in_place(x: &mut [f32]) -> Result<()> {
    let n = x.len();
    if !is_power_of_two(n) {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / libm::sqrtf(n as f32);
    for v in x.iter_mut() {
        *v *= scale;
    }
    Ok(())
}

/// Row-wise normalised Walsh–Hadamard transform along the last axis.
pub fn walsh_hadamard(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    walsh_hadamard_in_place(&mut out)?;
    Ok(out)
}

pub fn walsh_hadamard_in_place(x: &mut Tensor) -> Result<()> {
    let n = x.cols();
    if !is_power_of_two(n) {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    for row in x.rows_iter_mut() {
        fwht_in_place(row)?;
    }
    Ok(())
}

/// Explicit normalised Sylvester Hadamard matrix `H/√n`.
pub fn hadamard_matrix(n: usize) -> Result<Tensor> {
    if !is_power_of_two(n) {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    let s = 1.0 / libm::sqrtf(n as f32);
    Ok(Tensor::from_fn(n, n, |r, c| {
        if (r & c).count_ones() % 2 == 0 {
            s
        } else {
            -s
        }
    }))
}

/// An `n × n` orthogonal matrix `Q`.
#[derive(Debug, Clone, PartialEq)]
pub enum OrthogonalTransform {
    /// Normalised Sylvester Hadamard `H/√n`.
    ExactHadamard { n: usize },
    /// `diag(ε)·H/√n` with `ε ∈ {±1}ⁿ` drawn from a seeded generator.
    RandomHadamard { n: usize, seed: u64, signs: Vec<f32> },
    /// User-supplied matrix, checked for orthogonality on construction.
    Explicit(Tensor),
}

impl OrthogonalTransform {
    pub fn exact_hadamard(n: usize) -> Result<Self> {
        if !is_power_of_two(n) {
            return Err(Error::NotPowerOfTwo { len: n });
        }
        Ok(Self::ExactHadamard { n })
    }

    pub fn explicit(q: Tensor) -> Result<Self> {
        let shape = q.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::InvalidArgument("explicit transform must be square".into()));
        }
        q.ensure_finite("explicit transform")?;
        let t = Self::Explicit(q);
        let dev = t.orthogonality_error();
        if dev > EXPLICIT_ORTHOGONALITY_TOL {
            return Err(Error::NotOrthogonal { deviation: dev });
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::ExactHadamard { n } | Self::RandomHadamard { n, .. } => *n,
            Self::Explicit(q) => q.cols(),
        }
    }

    pub fn to_matrix(&self) -> Tensor {
        match self {
            Self::Explicit(q) => q.clone(),
            _ => {
                // Rows of Q are the images of the basis vectors.
                let mut m = Tensor::identity(self.dim());
                self.apply_in_place(&mut m).expect("dimension matches by construction");
                m
            }
        }
    }

    /// `x ← x·Q` for every row of `x`.
    pub fn apply_in_place(&self, x: &mut Tensor) -> Result<()> {
        self.check_dim(x.cols())?;
        match self {
            Self::ExactHadamard { .. } => walsh_hadamard_in_place(x),
            Self::RandomHadamard { signs, .. } => {
                for row in x.rows_iter_mut() {
                    for (v, s) in row.iter_mut().zip(signs) {
                        *v *= s;
                    }
                    fwht_in_place(row)?;
                }
                Ok(())
            }
            Self::Explicit(q) => {
                *x = x.matmul(q)?;
                Ok(())
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    /// `x ← x·Qᵀ` for every row of `x`.
    pub fn apply_transpose_in_place(&self, x: &mut Tensor) -> Result<()> {
        self.check_dim(x.cols())?;
        match self {
            Self::ExactHadamard { .. } => walsh_hadamard_in_place(x),
            Self::RandomHadamard { signs, .. } => {
                for row in x.rows_iter_mut() {
                    fwht_in_place(row)?;
                    for (v, s) in row.iter_mut().zip(signs) {
                        *v *= s;
                    }
                }
                Ok(())
            }
            Self::Explicit(q) => {
                *x = x.matmul(&q.transpose())?;
                Ok(())
            }
        }
    }

    /// `Qᵀ·w` for a weight whose rows are indexed by this transform's dimension.
    pub fn transpose_left_multiply(&self, w: &Tensor) -> Result<Tensor> {
        // Qᵀ·W = (Wᵀ·Q)ᵀ
        let mut wt = w.transpose();
        self.apply_in_place(&mut wt)?;
        Ok(wt.transpose())
    }

    /// `Q·w`.
    pub fn left_multiply(&self, w: &Tensor) -> Result<Tensor> {
        let mut wt = w.transpose();
        self.apply_transpose_in_place(&mut wt)?;
        Ok(wt.transpose())
    }

    /// `‖QᵀQ − I‖∞` (max-entry), accumulated in `f64`.
    pub fn orthogonality_error(&self) -> f64 {
        let qt = self.to_matrix().transpose();
        let n = qt.cols();
        let cols: Vec<f64> = qt.data().iter().map(|&v| v as f64).collect();
        let mut worst = 0.0f64;
        for i in 0..n {
            let ci = &cols[i * n..(i + 1) * n];
            for j in i..n {
                let cj = &cols[j * n..(j + 1) * n];
                let s: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - e).abs());
            }
        }
        worst
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "orthogonal transform",
                left: vec![cols],
                right: vec![self.dim()],
            });
        }
        Ok(())
    }
}

/// `Q = diag(ε)·H/√n` with uniformly random signs.
pub fn random_hadamard(n: usize, rng: &mut Rng) -> Result<OrthogonalTransform> {
    if !is_power_of_two(n) {
        return Err(Error::NotPowerOfTwo { len: n });
    }
    let signs = (0..n).map(|_| rng.sign()).collect();
    Ok(OrthogonalTransform::RandomHadamard {
        n,
        seed: rng.seed(),
        signs,
    })
}

/// The matrix `A` of an equivalent transformation.
#[derive(Debug, Clone, Copy)]
pub enum EquivalentTransform<'a> {
    Orthogonal(&'a OrthogonalTransform),
    /// `A = diag(s)⁻¹`, so `x̂ = x ⊘ s` and `ŵ = diag(s)·w`.
    Scaling(&'a [f32]),
    /// Any invertible `A`.
    General(&'a Tensor),
}

/// Returns `(x·A, A⁻¹·w)`; their product equals `x·w`.
pub fn apply_equivalent_transform(
    x: &Tensor,
    w: &Tensor,
    a: EquivalentTransform<'_>,
) -> Result<(Tensor, Tensor)> {
    let c_in = x.cols();
    if w.shape().len() != 2 || w.rows() != c_in {
        return Err(Error::ShapeMismatch {
            op: "equivalent transform",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    match a {
        EquivalentTransform::Orthogonal(q) => Ok((q.apply(x)?, q.transpose_left_multiply(w)?)),
        EquivalentTransform::Scaling(s) => {
            if s.len() != c_in {
                return Err(Error::ShapeMismatch {
                    op: "equivalent transform",
                    left: vec![c_in],
                    right: vec![s.len()],
                });
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("scales must be positive and finite".into()));
            }
            let mut xh = x.clone();
            for row in xh.rows_iter_mut() {
                for (v, sj) in row.iter_mut().zip(s) {
                    *v /= sj;
                }
            }
            let mut wh = w.clone();
            for (j, sj) in s.iter().enumerate() {
                for v in wh.row_mut(j) {
                    *v *= sj;
                }
            }
            Ok((xh, wh))
        }
        EquivalentTransform::General(a) => {
            if a.shape() != [c_in, c_in] {
                return Err(Error::ShapeMismatch {
                    op: "equivalent transform",
                    left: vec![c_in, c_in],
                    right: a.shape().to_vec(),
                });
            }
            let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
            let inv = linalg::invert(&a64, c_in, MAX_CONDITION)?;
            let inv = Tensor::new(vec![c_in, c_in], inv.iter().map(|&v| v as f32).collect())?;
            Ok((x.matmul(a)?, inv.matmul(w)?))
        }
    }
}
