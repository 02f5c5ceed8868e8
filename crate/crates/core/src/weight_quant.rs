//! Weight quantization backends: round-to-nearest with a per-channel clip
//! ratio search, and GPTQ (damped inverse-Hessian Cholesky, column sweep with
//! error feedback).
//!
//! Weights here are `[out × in]`; the model stores `[in × out]` and
//! transposes at the boundary.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Observer, Proj, Site, TinyModel};
use crate::numerics::{linalg, Tensor};
use crate::quant::{
    dequantize, dequantize_value, finite_range, group_sq_error, params_from_range, quantize_value,
    Granularity,
    QuantParams, QuantSpec, QuantizedTensor,
};

/// Candidate clip ratios, searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClipSearchConfig {
    /// Descending ratios in `(0, 1]`.
    pub grid: Vec<f32>,
}

impl Default for ClipSearchConfig {
    /// `1.00, 0.99, …, 0.50`.
    fn default() -> Self {
        Self {
            grid: (0..=50).map(|i| (100 - i) as f32 / 100.0).collect(),
        }
    }
}

impl ClipSearchConfig {
    /// Plain round-to-nearest without clipping.
    pub fn none() -> Self {
        Self { grid: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("clip search grid is empty".into()));
        }
        if self.grid.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidArgument("clip ratios must lie in (0, 1]".into()));
        }
        if self.grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("clip ratios must be strictly descending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WeightMethod {
    Rtn,
    Gptq,
}

impl WeightMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Rtn => "rtn",
            Self::Gptq => "gptq",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GptqConfig {
    /// Fraction of the mean Hessian diagonal added to the diagonal.
    pub damping: f64,
    /// Columns per lazy-update block.
    pub block_size: usize,
    /// Process columns in order of decreasing Hessian diagonal.
    pub act_order: bool,
    /// Per-row clip search used to fix each row's step size.
    pub clip: ClipSearchConfig,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            damping: 0.01,
            block_size: 128,
            act_order: false,
            clip: ClipSearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightQuantConfig {
    pub spec: QuantSpec,
    pub method: WeightMethod,
    pub clip: ClipSearchConfig,
    pub gptq: GptqConfig,
    /// Projections to quantize; the rest stay in float.
    pub sites: Vec<Proj>,
}

impl WeightQuantConfig {
    /// Per-channel symmetric RTN with the default clip search.
    pub fn rtn(bits: u8) -> Self {
        Self {
            spec: QuantSpec::per_channel(bits, 1.0).expect("valid default"),
            method: WeightMethod::Rtn,
            clip: ClipSearchConfig::default(),
            gptq: GptqConfig::default(),
            sites: Proj::ALL.to_vec(),
        }
    }

    pub fn gptq(bits: u8) -> Self {
        Self {
            method: WeightMethod::Gptq,
            ..Self::rtn(bits)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightQuantResult {
    pub quantized: QuantizedTensor,
    /// Chosen clip ratio per parameter group.
    pub ratios: Vec<f32>,
}

/// Searches the grid for the clip ratio minimising one group's squared error.
/// Ties keep the larger ratio.
fn search_group(values: &[f32], spec: &QuantSpec, clip: &ClipSearchConfig) -> Result<(f32, QuantParams)> {
    let (lo, hi) = finite_range(values)?;
    let range = spec.code_range();
    let mut best: Option<(f64, f32, QuantParams)> = None;
    for &ratio in &clip.grid {
        let s = QuantSpec {
            clip_ratio: ratio,
            ..*spec
        };
        let p = params_from_range(lo, hi, &s);
        // Partial sums only grow, so a candidate that reaches the best error stops early.
        let bound = best.map_or(f64::INFINITY, |(e, _, _)| e);
        if let Some(err) = group_sq_error(values, p, range, bound) {
            best = Some((err, ratio, p));
        }
    }
    let (_, ratio, params) = best.expect("grid validated nonempty");
    Ok((ratio, params))
}

fn search_params(w: &Tensor, spec: &QuantSpec, clip: &ClipSearchConfig) -> Result<(Vec<f32>, Vec<QuantParams>)> {
    spec.validate()?;
    clip.validate()?;
    w.ensure_finite("weight")?;
    let g = spec.group_len(w.shape())?;
    let mut ratios = Vec::with_capacity(w.len() / g);
    let mut params = Vec::with_capacity(w.len() / g);
    for chunk in w.data().chunks_exact(g) {
        let (r, p) = search_group(chunk, spec, clip)?;
        ratios.push(r);
        params.push(p);
    }
    Ok((ratios, params))
}

/// Round-to-nearest with a per-group clip ratio chosen to minimise squared error.
pub fn rtn_quantize_weight(w: &Tensor, spec: &QuantSpec, clip: &ClipSearchConfig) -> Result<WeightQuantResult> {
    let (ratios, params) = search_params(w, spec, clip)?;
    let quantized = crate::quant::quantize_with(w, &params, spec)?;
    Ok(WeightQuantResult { quantized, ratios })
}

/// `XᵀX` for calibration inputs `[tokens × in]`, in `f64`.
pub fn hessian(x: &Tensor) -> Vec<f64> {
    let n = x.cols();
    let mut h = vec![0.0f64; n * n];
    accumulate_hessian(&mut h, x);
    h
}

fn accumulate_hessian(h: &mut [f64], x: &Tensor) {
    let n = x.cols();
    for row in x.rows_iter() {
        for i in 0..n {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            let hr = &mut h[i * n..(i + 1) * n];
            for (hij, xj) in hr[i..].iter_mut().zip(&row[i..]) {
                *hij += xi * (*xj as f64);
            }
        }
    }
}

fn symmetrize_upper(h: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..i {
            h[i * n + j] = h[j * n + i];
        }
    }
}

/// Damping added to the Hessian diagonal: `frac · mean(diag)`.
pub fn damping_value(h: &[f64], n: usize, frac: f64) -> f64 {
    let mean = (0..n).map(|i| h[i * n + i]).sum::<f64>() / n.max(1) as f64;
    frac * mean
}

/// `tr((W − Ŵ)·H·(W − Ŵ)ᵀ)` for `[out × in]` weights and an `[in × in]` `H`.
pub fn proxy_loss(w: &Tensor, w_hat: &Tensor, h: &[f64]) -> Result<f64> {
    if w.shape() != w_hat.shape() || h.len() != w.cols() * w.cols() {
        return Err(Error::ShapeMismatch {
            op: "proxy_loss",
            left: w.shape().to_vec(),
            right: w_hat.shape().to_vec(),
        });
    }
    let n = w.cols();
    let mut total = 0.0;
    let mut e = vec![0.0f64; n];
    for (a, b) in w.rows_iter().zip(w_hat.rows_iter()) {
        for ((ei, x), y) in e.iter_mut().zip(a).zip(b) {
            *ei = (*x as f64) - (*y as f64);
        }
        for i in 0..n {
            if e[i] == 0.0 {
                continue;
            }
            let hr = &h[i * n..(i + 1) * n];
            total += e[i] * hr.iter().zip(&e).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    Ok(total)
}

/// `XᵀX + damping·mean(diag)·I`, the matrix both the sweep and the proxy loss use.
pub fn damped_hessian(x: &Tensor, frac: f64) -> Vec<f64> {
    let n = x.cols();
    let mut h = hessian(x);
    symmetrize_upper(&mut h, n);
    let damp = damping_value(&h, n, frac);
    for i in 0..n {
        h[i * n + i] += damp;
    }
    h
}

/// GPTQ on `[out × in]` weights with calibration inputs `[tokens × in]`.
pub fn gptq_quantize_weight(w: &Tensor, spec: &QuantSpec, calib: &Tensor, cfg: &GptqConfig) -> Result<WeightQuantResult> {
    if calib.cols() != w.cols() || calib.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "gptq calibration",
            left: w.shape().to_vec(),
            right: calib.shape().to_vec(),
        });
    }
    let n = w.cols();
    let mut h = hessian(calib);
    symmetrize_upper(&mut h, n);
    gptq_with_hessian(w, spec, &h, cfg)
}

/// GPTQ given the undamped `XᵀX`.
pub fn gptq_with_hessian(w: &Tensor, spec: &QuantSpec, h: &[f64], cfg: &GptqConfig) -> Result<WeightQuantResult> {
    const RETRIES: usize = 3;
    let (rows, n) = (w.rows(), w.cols());
    if h.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "gptq hessian",
            left: vec![n, n],
            right: vec![h.len()],
        });
    }
    if !(cfg.damping > 0.0) || cfg.block_size == 0 {
        return Err(Error::InvalidArgument("GPTQ needs positive damping and block size".into()));
    }
    match spec.granularity {
        Granularity::PerChannel | Granularity::PerToken | Granularity::PerTensor => {}
        Granularity::PerGroup(_) => {
            return Err(Error::InvalidSpec("GPTQ supports per-channel or per-tensor weights".into()))
        }
    }
    let (ratios, params) = search_params(w, spec, &cfg.clip)?;
    let row_params: Vec<QuantParams> = match spec.granularity {
        Granularity::PerTensor => vec![params[0]; rows],
        _ => params.clone(),
    };

    let perm: Vec<usize> = if cfg.act_order {
        let mut p: Vec<usize> = (0..n).collect();
        p.sort_by(|&a, &b| h[b * n + b].total_cmp(&h[a * n + a]));
        p
    } else {
        (0..n).collect()
    };
    let mut hp = vec![0.0f64; n * n];
    for (i, &pi) in perm.iter().enumerate() {
        for (j, &pj) in perm.iter().enumerate() {
            hp[i * n + j] = h[pi * n + pj];
        }
    }
    let mut damp = damping_value(&hp, n, cfg.damping);
    if !(damp > 0.0) {
        // No signal at all: any positive diagonal reduces the sweep to RTN.
        damp = 1.0;
    }
    let mut u = None;
    for _ in 0..=RETRIES {
        let mut hd = hp.clone();
        for i in 0..n {
            hd[i * n + i] += damp;
        }
        if linalg::cholesky_lower(&mut hd, n).is_some() {
            let inv = linalg::inverse_from_cholesky(&hd, n);
            if let Some(f) = linalg::cholesky_upper(&inv, n) {
                u = Some(f);
                break;
            }
        }
        damp *= 10.0;
    }
    let u = u.ok_or(Error::Factorization { retries: RETRIES })?;

    // Working copy, permuted columns, f64.
    let mut wk: Vec<f64> = vec![0.0; rows * n];
    for r in 0..rows {
        for (j, &pj) in perm.iter().enumerate() {
            wk[r * n + j] = w.get(r, pj) as f64;
        }
    }
    let range = spec.code_range();
    let mut codes_p = vec![0i32; rows * n];
    let bs = cfg.block_size;
    let mut err_block = vec![0.0f64; rows * bs];
    let mut i1 = 0;
    while i1 < n {
        let i2 = (i1 + bs).min(n);
        let count = i2 - i1;
        for i in 0..count {
            let col = i1 + i;
            let d = u[col * n + col];
            for r in 0..rows {
                let p = row_params[r];
                let wv = wk[r * n + col] as f32;
                let code = quantize_value(wv, p, range);
                codes_p[r * n + col] = code;
                let qv = dequantize_value(code, p) as f64;
                let e = (wk[r * n + col] - qv) / d;
                err_block[r * bs + i] = e;
                for j in (i + 1)..count {
                    wk[r * n + i1 + j] -= e * u[col * n + i1 + j];
                }
            }
        }
        for r in 0..rows {
            for j in i2..n {
                let mut s = 0.0;
                for i in 0..count {
                    s += err_block[r * bs + i] * u[(i1 + i) * n + j];
                }
                wk[r * n + j] -= s;
            }
        }
        i1 = i2;
    }

    let mut codes = vec![0i32; rows * n];
    for r in 0..rows {
        for (j, &pj) in perm.iter().enumerate() {
            codes[r * n + pj] = codes_p[r * n + j];
        }
    }
    let quantized = QuantizedTensor {
        codes,
        params,
        spec: *spec,
        shape: w.shape().to_vec(),
    };
    Ok(WeightQuantResult { quantized, ratios })
}

/// Accumulates `XᵀX` of every projection input seen during forward passes.
#[derive(Debug, Default, Clone)]
pub struct HessianObserver {
    pub hessians: BTreeMap<Site, (usize, Vec<f64>)>,
}

impl HessianObserver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Symmetric `XᵀX` for one site, if any input was observed.
    pub fn hessian(&self, site: Site) -> Option<Vec<f64>> {
        self.hessians.get(&site).map(|(n, h)| {
            let mut h = h.clone();
            symmetrize_upper(&mut h, *n);
            h
        })
    }
}

impl Observer for HessianObserver {
    fn projection_input(&mut self, site: Site, x: &Tensor) {
        let n = x.cols();
        let entry = self.hessians.entry(site).or_insert_with(|| (n, vec![0.0; n * n]));
        accumulate_hessian(&mut entry.1, x);
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerWeightReport {
    pub layer: String,
    pub backend: WeightMethod,
    pub bits: u8,
    pub clip_ratios: Vec<f32>,
    pub mse: f64,
    /// Relative squared error `‖W − Ŵ‖² / ‖W‖²`.
    pub rel_error: f64,
    /// Present when calibration Hessians were supplied.
    pub proxy_loss: Option<f64>,
}

fn proj_weight_mut(model: &mut TinyModel, site: Site) -> &mut Tensor {
    let l = &mut model.layers[site.layer];
    match site.proj {
        Proj::Q => &mut l.attn.w_q,
        Proj::K => &mut l.attn.w_k,
        Proj::V => &mut l.attn.w_v,
        Proj::O => &mut l.attn.w_o,
        Proj::Gate => &mut l.ffn.w_gate,
        Proj::Up => &mut l.ffn.w_up,
        Proj::Down => &mut l.ffn.w_down,
    }
}

/// Replaces the selected projection weights by their fake-quantized versions.
///
/// GPTQ needs `hessians` (e.g. from a [`HessianObserver`] run over
/// calibration sequences on the transformed model); RTN uses them only to
/// report proxy losses.
pub fn quantize_model_weights(
    model: &TinyModel,
    cfg: &WeightQuantConfig,
    hessians: Option<&HessianObserver>,
) -> Result<(TinyModel, Vec<LayerWeightReport>)> {
    let mut out = model.clone();
    let mut reports = Vec::new();
    for layer in 0..model.layers.len() {
        for &proj in &Proj::ALL {
            if !cfg.sites.contains(&proj) {
                continue;
            }
            let site = Site::new(layer, proj);
            let name = format!("layers.{layer}.{}", proj.name());
            let wrap = |e: Error| Error::Layer {
                layer: name.clone(),
                source: alloc::boxed::Box::new(e),
            };
            let w_store = proj_weight_mut(&mut out, site);
            let w = w_store.transpose();
            let h = hessians.and_then(|o| o.hessian(site));
            let result = match cfg.method {
                WeightMethod::Rtn => rtn_quantize_weight(&w, &cfg.spec, &cfg.clip),
                WeightMethod::Gptq => {
                    let h = h.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("GPTQ requires calibration Hessians".into())
                    });
                    h.and_then(|h| gptq_with_hessian(&w, &cfg.spec, h, &cfg.gptq))
                }
            }
            .map_err(wrap)?;
            let w_hat = dequantize(&result.quantized).map_err(wrap)?;
            let mse = w_hat.mse(&w).map_err(wrap)?;
            let energy = w.data().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
            let rel_error = if energy > 0.0 {
                mse * w.len() as f64 / energy
            } else {
                0.0
            };
            let proxy = match &h {
                Some(h) => {
                    let n = w.cols();
                    let mut hd = h.clone();
                    let damp = damping_value(h, n, cfg.gptq.damping);
                    for i in 0..n {
                        hd[i * n + i] += damp;
                    }
                    Some(proxy_loss(&w, &w_hat, &hd).map_err(wrap)?)
                }
                None => None,
            };
            *w_store = w_hat.transpose();
            reports.push(LayerWeightReport {
                layer: name,
                backend: cfg.method,
                bits: cfg.spec.bits,
                clip_ratios: result.ratios,
                mse,
                rel_error,
                proxy_loss: proxy,
            });
        }
    }
    Ok((out, reports))
}
