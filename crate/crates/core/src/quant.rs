//! Uniform integer quantization (step size / zero point) at per-tensor,
//! per-token, per-channel and per-group granularity.
//!
//! Symmetric codes are signed in `[-(2^(b-1) - 1), 2^(b-1) - 1]` with
//! `Δ = c·max|x| / (2^(b-1) - 1)`. Asymmetric codes are unsigned in
//! `[0, 2^b - 1]` with `Δ = (max - min) / (2^b - 1)` and `z = -round(min / Δ)`.
//! Rounding is half-to-even.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

/// Which slices share one `(Δ, z)` pair.
///
/// `PerToken` and `PerChannel` both group by row: activations are
/// `[tokens × channels]` and weights are `[out × in]`, so a row is a token or
/// an output channel respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    /// Contiguous groups of this many entries along the last axis.
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantSpec {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub clip_ratio: f32,
}

impl QuantSpec {
    pub fn new(bits: u8, scheme: Scheme, granularity: Granularity, clip_ratio: f32) -> Result<Self> {
        let spec = Self {
            bits,
            scheme,
            granularity,
            clip_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-token symmetric activation spec.
    pub fn per_token(bits: u8, clip_ratio: f32) -> Result<Self> {
        Self::new(bits, Scheme::Symmetric, Granularity::PerToken, clip_ratio)
    }

    /// Per-output-channel symmetric weight spec.
    pub fn per_channel(bits: u8, clip_ratio: f32) -> Result<Self> {
        Self::new(bits, Scheme::Symmetric, Granularity::PerChannel, clip_ratio)
    }

    /// Asymmetric grouped spec, as used for the KV cache.
    pub fn grouped_asymmetric(bits: u8, group_size: usize, clip_ratio: f32) -> Result<Self> {
        Self::new(
            bits,
            Scheme::Asymmetric,
            Granularity::PerGroup(group_size),
            clip_ratio,
        )
    }

    pub fn with_clip(mut self, clip_ratio: f32) -> Result<Self> {
        self.clip_ratio = clip_ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidSpec(format!("bits {} outside [2, 8]", self.bits)));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "clip ratio {} outside (0, 1]",
                self.clip_ratio
            )));
        }
        if let Granularity::PerGroup(0) = self.granularity {
            return Err(Error::InvalidSpec("group size must be positive".into()));
        }
        Ok(())
    }

    /// Inclusive code range.
    pub fn code_range(&self) -> (i32, i32) {
        match self.scheme {
            Scheme::Symmetric => {
                let q = (1i32 << (self.bits - 1)) - 1;
                (-q, q)
            }
            Scheme::Asymmetric => (0, (1i32 << self.bits) - 1),
        }
    }

    /// Number of entries sharing one parameter pair for a tensor of this shape.
    pub fn group_len(&self, shape: &[usize]) -> Result<usize> {
        let total: usize = shape.iter().product();
        let cols = shape.last().copied().unwrap_or(total);
        let len = match self.granularity {
            Granularity::PerTensor => total,
            Granularity::PerToken | Granularity::PerChannel => cols,
            Granularity::PerGroup(g) => {
                if cols % g != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "group size {g} does not divide axis length {cols}"
                    )));
                }
                g
            }
        };
        if len == 0 {
            return Err(Error::Empty { context: "quantize" });
        }
        Ok(len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantParams {
    pub delta: f32,
    pub zero_point: i32,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    /// One entry per group, in row-major group order.
    pub params: Vec<QuantParams>,
    pub spec: QuantSpec,
    pub shape: Vec<usize>,
}

/// Round half to even. Below 2^22 adding and removing 1.5·2^23 lands on
/// the integer grid under the default ties-to-even float rounding.
#[inline]
fn round_half_even(x: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0;
    if x.abs() < 4_194_304.0 {
        (x + MAGIC) - MAGIC
    } else {
        libm::rintf(x)
    }
}

/// Step size and zero point for one group.
pub fn compute_qparams(values: &[f32], spec: &QuantSpec) -> Result<QuantParams> {
    let (lo, hi) = finite_range(values)?;
    Ok(params_from_range(lo, hi, spec))
}

pub(crate) fn finite_range(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::Empty {
            context: "compute_qparams",
        });
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "compute_qparams",
            });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

pub(crate) fn params_from_range(lo: f32, hi: f32, spec: &QuantSpec) -> QuantParams {
    let c = spec.clip_ratio;
    let params = match spec.scheme {
        Scheme::Symmetric => {
            let qmax = ((1i32 << (spec.bits - 1)) - 1) as f32;
            let delta = c * lo.abs().max(hi.abs()) / qmax;
            QuantParams {
                delta,
                zero_point: 0,
            }
        }
        Scheme::Asymmetric => {
            let levels = ((1i32 << spec.bits) - 1) as f32;
            // Zero stays representable so the zero point lands inside the code range.
            let lo = (c * lo).min(0.0);
            let hi = (c * hi).max(0.0);
            let delta = (hi - lo) / levels;
            let z = if delta > 0.0 {
                -round_half_even(lo / delta)
            } else {
                0.0
            };
            QuantParams {
                delta,
                zero_point: (z as i32).clamp(0, levels as i32),
            }
        }
    };
    if params.delta > 0.0 && params.delta.is_finite() {
        params
    } else {
        QuantParams {
            delta: 1.0,
            zero_point: 0,
        }
    }
}

/// `clamp(round(x / Δ) + z, range)`.
#[inline]
pub fn quantize_value(x: f32, params: QuantParams, range: (i32, i32)) -> i32 {
    // Clamping before rounding gives the same code: the bounds are integers
    // and rounding is monotone. It also keeps the rounding input small.
    let z = params.zero_point as f32;
    let r = (x / params.delta).clamp(range.0 as f32 - z, range.1 as f32 - z);
    (round_half_even(r) + z) as i32
}

#[inline]
pub fn dequantize_value(code: i32, params: QuantParams) -> f32 {
    (code - params.zero_point) as f32 * params.delta
}

/// Parameters for every group of `x` under `spec`.
pub fn compute_group_params(x: &Tensor, spec: &QuantSpec) -> Result<Vec<QuantParams>> {
    spec.validate()?;
    let g = spec.group_len(x.shape())?;
    x.data().chunks_exact(g).map(|c| compute_qparams(c, spec)).collect()
}

/// Quantizes with caller-supplied per-group parameters.
pub fn quantize_with(x: &Tensor, params: &[QuantParams], spec: &QuantSpec) -> Result<QuantizedTensor> {
    let g = spec.group_len(x.shape())?;
    if params.len() * g != x.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter groups for {} entries of group length {g}",
            params.len(),
            x.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| !(p.delta > 0.0)) {
        return Err(Error::InvalidArgument(format!("step size {} must be positive", p.delta)));
    }
    let range = spec.code_range();
    let codes = x
        .data()
        .chunks_exact(g)
        .zip(params)
        .flat_map(|(chunk, &p)| chunk.iter().map(move |&v| quantize_value(v, p, range)))
        .collect();
    Ok(QuantizedTensor {
        codes,
        params: params.to_vec(),
        spec: *spec,
        shape: x.shape().to_vec(),
    })
}

/// Calibrates parameters on `x` itself and quantizes it.
pub fn quantize(x: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let params = compute_group_params(x, spec)?;
    quantize_with(x, &params, spec)
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    let g = q.spec.group_len(&q.shape)?;
    let data = q
        .codes
        .chunks_exact(g)
        .zip(&q.params)
        .flat_map(|(chunk, &p)| chunk.iter().map(move |&c| dequantize_value(c, p)))
        .collect();
    Tensor::new(q.shape.clone(), data)
}

/// Quantize-then-dequantize in floating point.
pub fn fake_quant(x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    let mut out = x.clone();
    fake_quant_in_place(&mut out, spec)?;
    Ok(out)
}

pub fn fake_quant_in_place(x: &mut Tensor, spec: &QuantSpec) -> Result<()> {
    spec.validate()?;
    let g = spec.group_len(x.shape())?;
    let range = spec.code_range();
    for chunk in x.data_mut().chunks_exact_mut(g) {
        let p = compute_qparams(chunk, spec)?;
        for v in chunk.iter_mut() {
            *v = dequantize_value(quantize_value(*v, p, range), p);
        }
    }
    Ok(())
}

/// Squared fake-quantization error of one group under fixed parameters.
/// Stops early, returning `None`, once the running sum reaches `bound`.
pub(crate) fn group_sq_error(values: &[f32], p: QuantParams, range: (i32, i32), bound: f64) -> Option<f64> {
    let mut err = 0.0f64;
    for chunk in values.chunks(16) {
        for &v in chunk {
            let d = (dequantize_value(quantize_value(v, p, range), p) - v) as f64;
            err += d * d;
        }
        if err >= bound {
            return None;
        }
    }
    Some(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sym4(c: f32) -> QuantSpec {
        QuantSpec::new(4, Scheme::Symmetric, Granularity::PerTensor, c).unwrap()
    }

    fn asym4() -> QuantSpec {
        QuantSpec::new(4, Scheme::Asymmetric, Granularity::PerTensor, 1.0).unwrap()
    }

    #[test]
    fn fast_rounding_matches_rint() {
        let mut rng = crate::numerics::Rng::seed_from(11);
        for _ in 0..20_000 {
            let x = rng.uniform_range(-300.0, 300.0);
            assert_eq!(round_half_even(x), libm::rintf(x));
            let h = libm::floorf(x) + 0.5;
            assert_eq!(round_half_even(h), libm::rintf(h));
        }
        for x in [1e7f32, -5e6, 4_194_304.5, 8_388_607.5, f32::MAX] {
            assert_eq!(round_half_even(x), libm::rintf(x));
        }
    }

    #[test]
    fn symmetric_params() {
        let p = compute_qparams(&[-3.0, 7.0, 1.0], &sym4(1.0)).unwrap();
        assert_eq!(p, QuantParams { delta: 1.0, zero_point: 0 });
        let p = compute_qparams(&[-7.0, 2.0], &sym4(1.0)).unwrap();
        assert_eq!(p.delta, 1.0);
    }

    #[test]
    fn asymmetric_params() {
        let p = compute_qparams(&[-1.0, 0.5, 2.0], &asym4()).unwrap();
        assert!((p.delta - 0.2).abs() < 1e-7);
        assert_eq!(p.zero_point, 5);
    }

    #[test]
    fn clip_shrinks_range() {
        let p = compute_qparams(&[10.0, -3.0], &sym4(0.9)).unwrap();
        assert!((p.delta - 9.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_zero_group() {
        let p = compute_qparams(&[0.0; 4], &sym4(1.0)).unwrap();
        assert_eq!(p, QuantParams { delta: 1.0, zero_point: 0 });
        let p = compute_qparams(&[0.0; 4], &asym4()).unwrap();
        assert_eq!(p, QuantParams { delta: 1.0, zero_point: 0 });
        let x = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert_eq!(fake_quant(&x, &sym4(1.0)).unwrap(), x);
    }

    #[test]
    fn qparams_errors() {
        assert!(matches!(compute_qparams(&[], &sym4(1.0)), Err(Error::Empty { .. })));
        assert!(matches!(
            compute_qparams(&[1.0, f32::NAN], &sym4(1.0)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn quantize_examples() {
        let s = sym4(1.0);
        let p = QuantParams { delta: 1.0, zero_point: 0 };
        assert_eq!(quantize_value(2.4, p, s.code_range()), 2);
        assert_eq!(quantize_value(100.0, p, s.code_range()), 7);
        assert_eq!(quantize_value(-100.0, p, s.code_range()), -7);
        let pa = QuantParams { delta: 0.2, zero_point: 5 };
        assert_eq!(quantize_value(-1.0, pa, asym4().code_range()), 0);
        assert_eq!(dequantize_value(2, p), 2.0);
        assert!((dequantize_value(0, pa) + 1.0).abs() < 1e-7);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams { delta: 1.0, zero_point: 0 };
        let r = sym4(1.0).code_range();
        assert_eq!(quantize_value(2.5, p, r), 2);
        assert_eq!(quantize_value(3.5, p, r), 4);
        assert_eq!(quantize_value(-0.5, p, r), 0);
    }

    #[test]
    fn non_positive_delta_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bad = [QuantParams { delta: 0.0, zero_point: 0 }];
        assert!(quantize_with(&x, &bad, &sym4(1.0)).is_err());
    }

    #[test]
    fn grid_values_are_fixed_points() {
        let x = Tensor::new(vec![8], vec![-7.0, -3.0, 0.0, 1.0, 2.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(fake_quant(&x, &sym4(1.0)).unwrap(), x);
        let q = quantize(&x, &sym4(1.0)).unwrap();
        assert_eq!(dequantize(&q).unwrap(), x);
    }

    #[test]
    fn ramp_error_within_half_step() {
        // 0..=15 rescaled to max 7; exhaustive check over the vector.
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 7.0 / 15.0).collect();
        let x = Tensor::new(vec![16], data.clone()).unwrap();
        let y = fake_quant(&x, &sym4(1.0)).unwrap();
        for (a, b) in data.iter().zip(y.data()) {
            assert!((a - b).abs() <= 0.5 + 1e-6);
        }
    }

    #[test]
    fn per_token_rows_independent() {
        let x = Tensor::from_rows(&[&[0.1, -0.3, 0.25, 0.05], &[100.0, -300.0, 250.0, 50.0]]).unwrap();
        let spec = QuantSpec::per_token(4, 1.0).unwrap();
        let y = fake_quant(&x, &spec).unwrap();
        let row_spec = sym4(1.0);
        for r in 0..2 {
            let row = Tensor::new(vec![4], x.row(r).to_vec()).unwrap();
            let alone = fake_quant(&row, &row_spec).unwrap();
            assert_eq!(y.row(r), alone.data());
            let delta = compute_qparams(x.row(r), &row_spec).unwrap().delta;
            for (a, b) in x.row(r).iter().zip(y.row(r)) {
                assert!((a - b).abs() <= delta / 2.0 * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn group_must_divide_axis() {
        let x = Tensor::zeros(&[2, 6]);
        let spec = QuantSpec::grouped_asymmetric(4, 4, 1.0).unwrap();
        assert!(matches!(fake_quant(&x, &spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::per_token(1, 0.9).is_err());
        assert!(QuantSpec::per_token(9, 0.9).is_err());
        assert!(QuantSpec::per_token(4, 0.0).is_err());
        assert!(QuantSpec::per_token(4, 1.1).is_err());
        assert!(QuantSpec::grouped_asymmetric(4, 0, 0.9).is_err());
    }
}
