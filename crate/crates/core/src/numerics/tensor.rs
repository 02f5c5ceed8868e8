use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
///
/// Activations are laid out `[tokens × channels]`, so per-token and
/// per-group operations work on contiguous slices of the last axis.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn new_finite(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the last axis (channels); 0 for a rank-0 shape.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn rows_iter(&self) -> core::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.cols().max(1))
    }

    pub fn rows_iter_mut(&mut self) -> core::slice::ChunksExactMut<'_, f32> {
        let c = self.cols().max(1);
        self.data.chunks_exact_mut(c)
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context })
        }
    }

    pub fn abs_max(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise `|self - other|`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − other‖∞ / ‖other‖∞`, treating `other` as the reference.
    pub fn rel_inf_error(&self, reference: &Tensor) -> Result<f64> {
        let diff = self.max_abs_diff(reference)? as f64;
        let scale = reference.abs_max() as f64;
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }

    /// `‖self − reference‖_F / ‖reference‖_F`.
    pub fn rel_error(&self, reference: &Tensor) -> Result<f64> {
        self.check_same_shape(reference, "rel_error")?;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, b) in self.data.iter().zip(&reference.data) {
            let d = (*a as f64) - (*b as f64);
            num += d * d;
            den += (*b as f64) * (*b as f64);
        }
        Ok(if den == 0.0 { libm::sqrt(num) } else { libm::sqrt(num / den) })
    }

    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "mse")?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a as f64) - (*b as f64);
                d * d
            })
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data,
        }
    }

    /// Matrix product `self · rhs` treating `self` as `[rows × k]`.
    ///
    /// Loop order is fixed (i, k, j) so results are reproducible bit-for-bit.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.shape.len() != 2 || self.cols() != rhs.shape[0] || self.shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.shape[1]);
        let mut out = vec![0.0f32; m * n];
        for (a_row, o_row) in self.data.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
            for (&a, b_row) in a_row.iter().zip(rhs.data.chunks_exact(n.max(1))) {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor { shape, data: out })
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}
