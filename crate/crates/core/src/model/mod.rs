//! Desk-scale LLaMA-style decoder: RMSNorm, causal multi-head attention with
//! a KV cache, and a SiLU-gated feed-forward block.
//!
//! Weights are stored `[in × out]` and applied as `x·W`. Activations are
//! `[tokens × channels]`.

mod block;
mod observe;
mod surgery;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::quant::QuantSpec;
use crate::weight_quant::WeightQuantConfig;

pub use block::{attention_forward, ffn_forward, silu, KvCache};
pub use observe::{AbsMaxObserver, DownProjTap, NoObserver, Observer, Proj, Site, TapRecorder};
pub use surgery::{fuse_rmsnorm, rotate_model, FuseOutcome, RotateOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub layers: usize,
    pub heads: usize,
    /// RMSNorm scales are drawn uniformly from this range.
    pub gamma_range: (f32, f32),
    pub rms_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            hidden: 64,
            intermediate: 256,
            layers: 2,
            heads: 4,
            gamma_range: (0.8, 1.2),
            rms_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::rotation::is_power_of_two;
        if self.vocab == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::InvalidArgument("vocab, layers and heads must be positive".into()));
        }
        if !is_power_of_two(self.hidden) || !is_power_of_two(self.intermediate) {
            return Err(Error::InvalidArgument(alloc::format!(
                "hidden ({}) and intermediate ({}) sizes must be powers of two",
                self.hidden,
                self.intermediate
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "hidden size {} not divisible by {} heads",
                self.hidden,
                self.heads
            )));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidArgument("gamma range must be positive and ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gamma: Vec<f32>,
    pub eps: f32,
}

impl RmsNorm {
    pub fn unit(dim: usize, eps: f32) -> Self {
        Self {
            gamma: alloc::vec![1.0; dim],
            eps,
        }
    }

    pub fn is_unit(&self) -> bool {
        self.gamma.iter().all(|&g| g == 1.0)
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ γ`, row-wise.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for row in out.rows_iter_mut() {
            let ms = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / row.len() as f64;
            let inv = (1.0 / libm::sqrt(ms + self.eps as f64)) as f32;
            for (v, g) in row.iter_mut().zip(&self.gamma) {
                *v *= inv * g;
            }
        }
        out
    }
}

/// Gate/up/down projections of a GLU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock {
    /// `[d × m]`
    pub w_gate: Tensor,
    /// `[d × m]`
    pub w_up: Tensor,
    /// `[m × d]`
    pub w_down: Tensor,
    /// Apply the normalised Hadamard to the down-projection input at runtime.
    pub online_hadamard: bool,
}

impl FfnBlock {
    pub fn hidden(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn intermediate(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = (self.hidden(), self.intermediate());
        if self.w_up.shape() != [d, m] || self.w_down.shape() != [m, d] {
            return Err(Error::ShapeMismatch {
                op: "ffn block",
                left: self.w_up.shape().to_vec(),
                right: self.w_down.shape().to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    /// Apply the normalised Hadamard to the output-projection input at runtime.
    pub o_proj_hadamard: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn_norm: RmsNorm,
    pub attn: AttentionBlock,
    pub ffn_norm: RmsNorm,
    pub ffn: FfnBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TransformState {
    None,
    Smoothed,
    Rotated,
    #[cfg_attr(feature = "serde", serde(rename = "smoothrot"))]
    SmoothRot,
}

impl TransformState {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Smoothed => "smoothed",
            Self::Rotated => "rotated",
            Self::SmoothRot => "smoothrot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Self::None,
            "smoothed" => Self::Smoothed,
            "rotated" => Self::Rotated,
            "smoothrot" => Self::SmoothRot,
            _ => return None,
        })
    }
}

/// Online quantization sites of a forward pass plus the offline weight backend.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantConfig {
    /// Inputs of every linear projection except the output head.
    pub act: Option<QuantSpec>,
    /// Keys and values before cache insertion.
    pub kv: Option<QuantSpec>,
    pub weight: Option<WeightQuantConfig>,
}

impl QuantConfig {
    /// 4-bit weights, activations and KV cache for a model of hidden size `hidden`.
    pub fn w4a4kv4(hidden: usize) -> Self {
        Self::uniform(4, hidden)
    }

    pub fn uniform(bits: u8, hidden: usize) -> Self {
        Self {
            act: Some(QuantSpec::per_token(bits, 0.9).expect("valid default")),
            kv: Some(
                QuantSpec::grouped_asymmetric(bits, 128.min(hidden), 0.95).expect("valid default"),
            ),
            weight: Some(WeightQuantConfig::rtn(bits)),
        }
    }

    pub fn disabled() -> Self {
        Self {
            act: None,
            kv: None,
            weight: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Float,
    Quantized(&'a QuantConfig),
}

impl<'a> Mode<'a> {
    pub(crate) fn act(&self) -> Option<&'a QuantSpec> {
        match self {
            Mode::Float => None,
            Mode::Quantized(c) => c.act.as_ref(),
        }
    }

    pub(crate) fn kv(&self) -> Option<&'a QuantSpec> {
        match self {
            Mode::Float => None,
            Mode::Quantized(c) => c.kv.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    pub config: ModelConfig,
    /// `[vocab × d]`
    pub embedding: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: RmsNorm,
    /// `[d × vocab]`
    pub head: Tensor,
    pub state: TransformState,
    pub norms_fused: bool,
}

impl TinyModel {
    /// Random weights: embeddings `N(0, 1)`, projections `N(0, 1/fan_in)`.
    pub fn random(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, m, v) = (config.hidden, config.intermediate, config.vocab);
        let sd = 1.0 / libm::sqrtf(d as f32);
        let sm = 1.0 / libm::sqrtf(m as f32);
        let (glo, ghi) = config.gamma_range;
        let norm = |rng: &mut Rng| RmsNorm {
            gamma: (0..d).map(|_| rng.uniform_range(glo, ghi)).collect(),
            eps: config.rms_eps,
        };
        let embedding = rng.normal_tensor(v, d, 1.0);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn_norm = norm(rng);
            let attn = AttentionBlock {
                w_q: rng.normal_tensor(d, d, sd),
                w_k: rng.normal_tensor(d, d, sd),
                w_v: rng.normal_tensor(d, d, sd),
                w_o: rng.normal_tensor(d, d, sd),
                heads: config.heads,
                o_proj_hadamard: false,
            };
            let ffn_norm = norm(rng);
            let ffn = FfnBlock {
                w_gate: rng.normal_tensor(d, m, sd),
                w_up: rng.normal_tensor(d, m, sd),
                w_down: rng.normal_tensor(m, d, sm),
                online_hadamard: false,
            };
            layers.push(DecoderLayer {
                attn_norm,
                attn,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = norm(rng);
        let head = rng.normal_tensor(d, v, sd);
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm,
            head,
            state: TransformState::None,
            norms_fused: false,
        })
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.hidden;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
            data.extend_from_slice(self.embedding.row(t as usize));
        }
        Tensor::new(alloc::vec![tokens.len(), d], data)
    }

    /// Logits `[tokens × vocab]` for one causal sequence.
    pub fn forward(&self, tokens: &[u32], mode: Mode<'_>, observer: &mut dyn Observer) -> Result<Tensor> {
        let mut h = self.embed(tokens)?;
        let mut caches: Vec<KvCache> = self.layers.iter().map(|_| KvCache::new(self.config.hidden)).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.layer_forward(i, layer, h, &mut caches[i], mode, observer)?;
        }
        let n = self.final_norm.forward(&h);
        n.matmul(&self.head)
    }

    /// Continues a sequence whose earlier tokens are already in `caches`.
    pub fn forward_cached(
        &self,
        tokens: &[u32],
        caches: &mut [KvCache],
        mode: Mode<'_>,
        observer: &mut dyn Observer,
    ) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(Error::InvalidArgument("one KV cache per layer required".into()));
        }
        let mut h = self.embed(tokens)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.layer_forward(i, layer, h, &mut caches[i], mode, observer)?;
        }
        self.final_norm.forward(&h).matmul(&self.head)
    }

    fn layer_forward(
        &self,
        index: usize,
        layer: &DecoderLayer,
        mut h: Tensor,
        cache: &mut KvCache,
        mode: Mode<'_>,
        observer: &mut dyn Observer,
    ) -> Result<Tensor> {
        let n = layer.attn_norm.forward(&h);
        let a = attention_forward(&layer.attn, &n, cache, mode, index, observer)?;
        add_assign(&mut h, &a);
        let n = layer.ffn_norm.forward(&h);
        let f = ffn_forward(&layer.ffn, &n, mode, index, observer)?;
        add_assign(&mut h, &f);
        Ok(h)
    }

    /// Logits for several independent sequences, stacked row-wise.
    pub fn forward_batch(&self, seqs: &[Vec<u32>], mode: Mode<'_>, observer: &mut dyn Observer) -> Result<Tensor> {
        let vocab = self.config.vocab;
        let mut data = Vec::new();
        let mut rows = 0;
        for s in seqs {
            let logits = self.forward(s, mode, observer)?;
            rows += logits.rows();
            data.extend_from_slice(logits.data());
        }
        Tensor::new(alloc::vec![rows, vocab], data)
    }
}

fn add_assign(h: &mut Tensor, x: &Tensor) {
    for (a, b) in h.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests;
