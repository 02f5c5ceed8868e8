//! Archive layouts for models, calibration statistics, smoothing factors,
//! quantized tensors and explicit rotations.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use smoothrot_core::model::{
    AttentionBlock, DecoderLayer, FfnBlock, ModelConfig, QuantConfig, RmsNorm, TinyModel, TransformState,
};
use smoothrot_core::outliers::CircuitInfo;
use smoothrot_core::quant::{QuantParams, QuantSpec, QuantizedTensor};
use smoothrot_core::rotation::OrthogonalTransform;
use smoothrot_core::smoothing::{CalibrationStats, SmoothingFactors};
use smoothrot_core::Tensor;

use crate::archive::Archive;
use crate::error::{Error, Result};

/// Outlier circuit description stored with a generated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitManifest {
    pub layer: usize,
    pub channels: Vec<usize>,
    pub spike_magnitude: f32,
    pub triggers: [u32; 2],
    pub trigger_response: f32,
    pub sink_layers: Vec<usize>,
}

impl CircuitManifest {
    pub fn new(info: &CircuitInfo, channels: &[usize], spike_magnitude: f32) -> Self {
        Self {
            layer: info.layer,
            channels: channels.to_vec(),
            spike_magnitude,
            triggers: [info.triggers.start, info.triggers.end],
            trigger_response: info.trigger_response,
            sink_layers: info.sink_layers.clone(),
        }
    }

    pub fn trigger_range(&self) -> std::ops::Range<u32> {
        self.triggers[0]..self.triggers[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub config: ModelConfig,
    pub layers: usize,
    pub transform_state: TransformState,
    pub norms_fused: bool,
    pub down_proj_hadamard: Vec<bool>,
    pub o_proj_hadamard: Vec<bool>,
    /// Quantization applied to the stored weights and expected at inference.
    pub quant: Option<QuantConfig>,
    pub outliers: Option<CircuitManifest>,
}

fn layer_key(l: usize, part: &str) -> String {
    format!("layers.{l}.{part}")
}

fn vector(v: &[f32]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d")
}

pub fn model_to_archive(model: &TinyModel, quant: Option<&QuantConfig>, outliers: Option<&CircuitManifest>) -> Archive {
    let manifest = ModelManifest {
        kind: "model".into(),
        config: model.config,
        layers: model.layers.len(),
        transform_state: model.state,
        norms_fused: model.norms_fused,
        down_proj_hadamard: model.layers.iter().map(|l| l.ffn.online_hadamard).collect(),
        o_proj_hadamard: model.layers.iter().map(|l| l.attn.o_proj_hadamard).collect(),
        quant: quant.cloned(),
        outliers: outliers.cloned(),
    };
    let mut a = Archive::with_metadata(serde_json::to_value(manifest).expect("plain data"));
    a.insert("embedding", model.embedding.clone());
    a.insert("head", model.head.clone());
    a.insert("final_norm.gamma", vector(&model.final_norm.gamma));
    for (i, l) in model.layers.iter().enumerate() {
        a.insert(layer_key(i, "attn_norm.gamma"), vector(&l.attn_norm.gamma));
        a.insert(layer_key(i, "ffn_norm.gamma"), vector(&l.ffn_norm.gamma));
        a.insert(layer_key(i, "attn.q"), l.attn.w_q.clone());
        a.insert(layer_key(i, "attn.k"), l.attn.w_k.clone());
        a.insert(layer_key(i, "attn.v"), l.attn.w_v.clone());
        a.insert(layer_key(i, "attn.o"), l.attn.w_o.clone());
        a.insert(layer_key(i, "ffn.gate"), l.ffn.w_gate.clone());
        a.insert(layer_key(i, "ffn.up"), l.ffn.w_up.clone());
        a.insert(layer_key(i, "ffn.down"), l.ffn.w_down.clone());
    }
    a
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Contents(format!(
            "'{name}' has shape {:?}, manifest implies {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn manifest<T: for<'de> Deserialize<'de>>(a: &Archive, kind: &str) -> Result<T> {
    let meta = a
        .metadata
        .as_ref()
        .ok_or_else(|| Error::Contents(format!("missing {kind} manifest")))?;
    match meta.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Contents(format!(
                "expected a {kind} archive, found kind {other:?}"
            )))
        }
    }
    serde_json::from_value(meta.clone()).map_err(|e| Error::Contents(format!("{kind} manifest: {e}")))
}

pub fn model_from_archive(mut a: Archive) -> Result<(TinyModel, ModelManifest)> {
    let m: ModelManifest = manifest(&a, "model")?;
    m.config.validate()?;
    let (v, d, f) = (m.config.vocab, m.config.hidden, m.config.intermediate);
    if m.layers != m.config.layers || m.down_proj_hadamard.len() != m.layers || m.o_proj_hadamard.len() != m.layers {
        return Err(Error::Contents("layer count disagrees across the manifest".into()));
    }
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = a.take_tensor(&name)?;
        expect_shape(&name, &t, shape)?;
        Ok(t)
    };
    let eps = m.config.rms_eps;
    let norm = |t: Tensor| RmsNorm {
        gamma: t.into_data(),
        eps,
    };
    let embedding = take("embedding".into(), &[v, d])?;
    let head = take("head".into(), &[d, v])?;
    let final_norm = norm(take("final_norm.gamma".into(), &[d])?);
    let mut layers = Vec::with_capacity(m.layers);
    for i in 0..m.layers {
        layers.push(DecoderLayer {
            attn_norm: norm(take(layer_key(i, "attn_norm.gamma"), &[d])?),
            attn: AttentionBlock {
                w_q: take(layer_key(i, "attn.q"), &[d, d])?,
                w_k: take(layer_key(i, "attn.k"), &[d, d])?,
                w_v: take(layer_key(i, "attn.v"), &[d, d])?,
                w_o: take(layer_key(i, "attn.o"), &[d, d])?,
                heads: m.config.heads,
                o_proj_hadamard: m.o_proj_hadamard[i],
            },
            ffn_norm: norm(take(layer_key(i, "ffn_norm.gamma"), &[d])?),
            ffn: FfnBlock {
                w_gate: take(layer_key(i, "ffn.gate"), &[d, f])?,
                w_up: take(layer_key(i, "ffn.up"), &[d, f])?,
                w_down: take(layer_key(i, "ffn.down"), &[f, d])?,
                online_hadamard: m.down_proj_hadamard[i],
            },
        });
    }
    if let Some(extra) = a.entries.keys().next() {
        return Err(Error::Contents(format!("unexpected entry '{extra}' in model archive")));
    }
    let model = TinyModel {
        config: m.config,
        embedding,
        layers,
        final_norm,
        head,
        state: m.transform_state,
        norms_fused: m.norms_fused,
    };
    Ok((model, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatsManifest {
    kind: String,
    source: String,
    token_count: usize,
    layers: usize,
}

/// Per-layer down-projection input maxima, one `layers.{i}.act_absmax` entry each.
pub fn stats_to_archive(stats: &[CalibrationStats]) -> Archive {
    let first = stats.first();
    let mut a = Archive::with_metadata(json!(StatsManifest {
        kind: "calibration".into(),
        source: first.map(|s| s.source.clone()).unwrap_or_default(),
        token_count: first.map_or(0, |s| s.token_count),
        layers: stats.len(),
    }));
    for (i, s) in stats.iter().enumerate() {
        a.insert(layer_key(i, "act_absmax"), vector(&s.act_absmax));
    }
    a
}

pub fn stats_from_archive(a: &Archive) -> Result<Vec<CalibrationStats>> {
    let m: StatsManifest = manifest(a, "calibration")?;
    (0..m.layers)
        .map(|i| {
            let t = a.tensor(&layer_key(i, "act_absmax"))?;
            if t.shape().len() != 1 || t.data().iter().any(|v| *v < 0.0) {
                return Err(Error::Contents(format!("layer {i}: activation maxima must be a non-negative vector")));
            }
            Ok(CalibrationStats {
                act_absmax: t.data().to_vec(),
                token_count: m.token_count,
                source: m.source.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorsManifest {
    pub kind: String,
    pub alpha: f32,
    pub source: String,
    pub token_count: usize,
}

/// Smoothing vectors of every layer stacked into entry `s` (`[layers × m]`).
pub fn factors_to_archive(factors: &[SmoothingFactors], source: &str, token_count: usize) -> Result<Archive> {
    let m = factors.first().map_or(0, |f| f.s.len());
    if factors.iter().any(|f| f.s.len() != m) {
        return Err(Error::Contents("smoothing vectors differ in length".into()));
    }
    let alpha = factors.first().map_or(0.0, |f| f.alpha);
    let mut a = Archive::with_metadata(json!(FactorsManifest {
        kind: "smoothing".into(),
        alpha,
        source: source.into(),
        token_count,
    }));
    let data = factors.iter().flat_map(|f| f.s.iter().copied()).collect();
    a.insert("s", Tensor::new(vec![factors.len(), m], data)?);
    Ok(a)
}

pub fn factors_from_archive(a: &Archive) -> Result<(Vec<SmoothingFactors>, FactorsManifest)> {
    let m: FactorsManifest = manifest(a, "smoothing")?;
    let s = a.tensor("s")?;
    if s.shape().len() != 2 {
        return Err(Error::Contents("entry 's' must be [layers x channels]".into()));
    }
    let f = s
        .rows_iter()
        .map(|r| SmoothingFactors {
            s: r.to_vec(),
            alpha: m.alpha,
        })
        .collect();
    Ok((f, m))
}

#[derive(Serialize, Deserialize)]
struct QuantSidecar {
    spec: QuantSpec,
    params: Vec<QuantParams>,
}

/// Stores integer codes as `{name}.codes` (i32) with spec and parameters in
/// the metadata object under `quantized.{name}`.
pub fn insert_quantized(a: &mut Archive, name: &str, q: &QuantizedTensor) {
    a.insert_i32(format!("{name}.codes"), q.shape.clone(), q.codes.clone());
    let meta = a.metadata.get_or_insert_with(|| json!({}));
    if !meta.is_object() {
        *meta = json!({});
    }
    let side = serde_json::to_value(QuantSidecar {
        spec: q.spec,
        params: q.params.clone(),
    })
    .expect("plain data");
    let obj = meta.as_object_mut().expect("object");
    obj.entry("quantized").or_insert_with(|| json!({}))[name] = side;
}

pub fn load_quantized(a: &Archive, name: &str) -> Result<QuantizedTensor> {
    let (shape, codes) = a.ints(&format!("{name}.codes"))?;
    let side = a
        .metadata
        .as_ref()
        .and_then(|m| m.get("quantized"))
        .and_then(|q| q.get(name))
        .ok_or_else(|| Error::Contents(format!("no sidecar for quantized tensor '{name}'")))?;
    let side: QuantSidecar =
        serde_json::from_value(side.clone()).map_err(|e| Error::Contents(format!("sidecar '{name}': {e}")))?;
    side.spec.validate()?;
    let groups = codes.len().checked_div(side.spec.group_len(shape)?).unwrap_or(0);
    if side.params.len() != groups {
        return Err(Error::Contents(format!(
            "'{name}': {} parameter groups for {groups} code groups",
            side.params.len()
        )));
    }
    let (lo, hi) = side.spec.code_range();
    if codes.iter().any(|c| *c < lo || *c > hi) {
        return Err(Error::Contents(format!("'{name}': code outside [{lo}, {hi}]")));
    }
    Ok(QuantizedTensor {
        codes: codes.to_vec(),
        params: side.params,
        spec: side.spec,
        shape: shape.to_vec(),
    })
}

/// Explicit orthogonal matrix from entry `Q`.
pub fn rotation_from_archive(a: &Archive) -> Result<OrthogonalTransform> {
    Ok(OrthogonalTransform::explicit(a.tensor("Q")?.clone())?)
}

pub fn rotation_to_archive(q: &OrthogonalTransform) -> Archive {
    let mut a = Archive::new();
    a.insert("Q", q.to_matrix());
    a
}
