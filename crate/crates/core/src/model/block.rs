use alloc::vec;
use alloc::vec::Vec;

use super::observe::{Observer, Proj, Site};
use super::{AttentionBlock, FfnBlock, Mode};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quant::fake_quant_in_place;
use crate::rotation::walsh_hadamard_in_place;

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

/// `(σ(x·W_gate) ⊙ (x·W_up))·W_down` with σ = SiLU.
///
/// In quantized mode every projection input is fake-quantized with the
/// activation spec. The down-projection input is Hadamard-transformed first
/// when the block carries an online Hadamard.
pub fn ffn_forward(
    block: &FfnBlock,
    x: &Tensor,
    mode: Mode<'_>,
    layer: usize,
    observer: &mut dyn Observer,
) -> Result<Tensor> {
    if x.cols() != block.hidden() {
        return Err(Error::ShapeMismatch {
            op: "ffn_forward",
            left: x.shape().to_vec(),
            right: block.w_gate.shape().to_vec(),
        });
    }
    x.ensure_finite("ffn_forward input")?;
    observer.projection_input(Site::new(layer, Proj::Gate), x);
    observer.projection_input(Site::new(layer, Proj::Up), x);
    let xq = quantized_input(x, mode)?;
    let gate = xq.matmul(&block.w_gate)?;
    let mut act = xq.matmul(&block.w_up)?;
    for (u, g) in act.data_mut().iter_mut().zip(gate.data()) {
        *u *= silu(*g);
    }
    if block.online_hadamard {
        let pre = act.clone();
        walsh_hadamard_in_place(&mut act)?;
        observer.down_proj_input(layer, &pre, &act);
    } else {
        observer.down_proj_input(layer, &act, &act);
    }
    observer.projection_input(Site::new(layer, Proj::Down), &act);
    if let Some(spec) = mode.act() {
        fake_quant_in_place(&mut act, spec)?;
    }
    act.matmul(&block.w_down)
}

fn quantized_input(x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
    let mut xq = x.clone();
    if let Some(spec) = mode.act() {
        fake_quant_in_place(&mut xq, spec)?;
    }
    Ok(xq)
}

/// Per-layer key/value cache, `[len × d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KvCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) {
        self.keys.extend_from_slice(k.data());
        self.values.extend_from_slice(v.data());
    }
}

/// Dot product with eight interleaved partial sums so it vectorizes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Causal multi-head attention over the cached prefix plus `x`.
///
/// Keys and values are fake-quantized with the KV spec (when the mode
/// enables it) before they enter the cache.
pub fn attention_forward(
    block: &AttentionBlock,
    x: &Tensor,
    cache: &mut KvCache,
    mode: Mode<'_>,
    layer: usize,
    observer: &mut dyn Observer,
) -> Result<Tensor> {
    let d = block.w_q.rows();
    if x.cols() != d || cache.dim != d {
        return Err(Error::ShapeMismatch {
            op: "attention_forward",
            left: x.shape().to_vec(),
            right: block.w_q.shape().to_vec(),
        });
    }
    if block.heads == 0 || d % block.heads != 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "hidden size {d} not divisible by {} heads",
            block.heads
        )));
    }
    for p in [Proj::Q, Proj::K, Proj::V] {
        observer.projection_input(Site::new(layer, p), x);
    }
    let xq = quantized_input(x, mode)?;
    let q = xq.matmul(&block.w_q)?;
    let mut k = xq.matmul(&block.w_k)?;
    let mut v = xq.matmul(&block.w_v)?;
    if let Some(spec) = mode.kv() {
        fake_quant_in_place(&mut k, spec)?;
        fake_quant_in_place(&mut v, spec)?;
    }
    let past = cache.len();
    cache.append(&k, &v);

    let t_new = x.rows();
    let hd = d / block.heads;
    let scale = 1.0 / libm::sqrtf(hd as f32);
    let mut out = vec![0.0f32; t_new * d];
    let mut scores = Vec::with_capacity(past + t_new);
    for t in 0..t_new {
        let visible = past + t + 1;
        let q_row = q.row(t);
        for h in 0..block.heads {
            let qh = &q_row[h * hd..(h + 1) * hd];
            scores.clear();
            let mut max = f32::NEG_INFINITY;
            for j in 0..visible {
                let kh = &cache.keys[j * d + h * hd..j * d + (h + 1) * hd];
                let s = dot(qh, kh) * scale;
                max = max.max(s);
                scores.push(s);
            }
            let mut total = 0.0f32;
            for s in scores.iter_mut() {
                *s = libm::expf(*s - max);
                total += *s;
            }
            let o = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
            let inv = 1.0 / total;
            for (j, p) in scores.iter().enumerate() {
                let vh = &cache.values[j * d + h * hd..j * d + (h + 1) * hd];
                let w = p * inv;
                for (oi, vi) in o.iter_mut().zip(vh) {
                    *oi += w * vi;
                }
            }
        }
    }
    let mut o = Tensor::new(vec![t_new, d], out)?;
    if block.o_proj_hadamard {
        walsh_hadamard_in_place(&mut o)?;
    }
    observer.projection_input(Site::new(layer, Proj::O), &o);
    if let Some(spec) = mode.act() {
        fake_quant_in_place(&mut o, spec)?;
    }
    o.matmul(&block.w_o)
}
