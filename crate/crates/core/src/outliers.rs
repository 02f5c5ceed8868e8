//! Massive activation outliers: synthesis, detection and a weight-level
//! circuit that makes a random model produce them.
//!
//! An entry is massive when `|v| > 100` and `|v| > 1000·median|x|`, with the
//! median taken over the whole tensor.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Observer, Proj, Site, TinyModel, TransformState};
use crate::numerics::{Rng, Tensor};

pub const MASSIVE_ABS_THRESHOLD: f32 = 100.0;
pub const MASSIVE_MEDIAN_RATIO: f32 = 1000.0;
/// Median of `|N(0, 1)|`.
pub const MEDIAN_ABS_NORMAL: f32 = 0.674_489_75;

/// Gate pre-activation the circuit drives trigger tokens to; SiLU is
/// practically linear there.
const GATE_DRIVE: f32 = 8.0;
/// Trigger embeddings are this multiple of `√d` along the outlier direction.
const TRIGGER_EMBED_SCALE: f32 = 4.0;
/// Size of the shared component added to every ordinary embedding.
const COMMON_EMBED_SCALE: f32 = 4.0;
/// Down-projection rows of spike channels are shrunk by this factor.
const SPIKE_ROW_SCALE: f32 = 0.5;
/// Attention logit ordinary tokens give trigger tokens in sink layers.
const SINK_LOGIT: f32 = 7.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutlierProfile {
    pub channel_indices: Vec<usize>,
    /// Fraction of tokens carrying spikes, in `(0, 1]`.
    pub token_fraction: f32,
    pub spike_magnitude: f32,
    /// Scale of the normal floor under the spikes.
    pub base_scale: f32,
}

impl Default for OutlierProfile {
    fn default() -> Self {
        Self {
            channel_indices: Vec::new(),
            token_fraction: 0.02,
            spike_magnitude: 1400.0,
            base_scale: 0.02,
        }
    }
}

impl OutlierProfile {
    pub fn new(channel_indices: Vec<usize>) -> Self {
        Self {
            channel_indices,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.channel_indices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.token_fraction > 0.0 && self.token_fraction <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "token fraction {} outside (0, 1]",
                self.token_fraction
            )));
        }
        if !(self.spike_magnitude.is_finite() && self.spike_magnitude > 0.0) {
            return Err(Error::InvalidArgument("spike magnitude must be positive and finite".into()));
        }
        if !(self.base_scale.is_finite() && self.base_scale >= 0.0) {
            return Err(Error::InvalidArgument("base scale must be non-negative and finite".into()));
        }
        Ok(())
    }

    /// Whether spikes over the expected floor median pass both detector
    /// thresholds.
    pub fn detectable(&self) -> bool {
        self.spike_magnitude > MASSIVE_ABS_THRESHOLD
            && self.spike_magnitude > MASSIVE_MEDIAN_RATIO * self.base_scale * MEDIAN_ABS_NORMAL
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        match self.channel_indices.iter().find(|&&c| c >= channels) {
            Some(c) => Err(Error::InvalidArgument(alloc::format!(
                "outlier channel {c} out of range for {channels} channels"
            ))),
            None => Ok(()),
        }
    }

    /// Number of spiked tokens among `tokens`: at least one.
    pub fn spiked_count(&self, tokens: usize) -> usize {
        (libm::roundf(self.token_fraction * tokens as f32) as usize).clamp(1, tokens.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierActivations {
    pub tensor: Tensor,
    /// `(token, channel)` of every spike, sorted.
    pub planted: Vec<(usize, usize)>,
    /// Set when the profile had no channels and the tensor is plain noise.
    pub empty_profile: bool,
}

/// Normal floor at `base_scale` with `±spike_magnitude` at every (spiked
/// token, chosen channel) pair.
pub fn gen_outlier_activations(
    tokens: usize,
    channels: usize,
    profile: &OutlierProfile,
    rng: &mut Rng,
) -> Result<OutlierActivations> {
    profile.validate()?;
    profile.check_channels(channels)?;
    let mut tensor = rng.normal_tensor(tokens, channels, profile.base_scale);
    if profile.is_empty() || tokens == 0 {
        return Ok(OutlierActivations {
            tensor,
            planted: Vec::new(),
            empty_profile: profile.is_empty(),
        });
    }
    let mut spiked = rng.choose_distinct(tokens, profile.spiked_count(tokens));
    spiked.sort_unstable();
    let mut channels_sorted = profile.channel_indices.clone();
    channels_sorted.sort_unstable();
    channels_sorted.dedup();
    let mut planted = Vec::with_capacity(spiked.len() * channels_sorted.len());
    for &t in &spiked {
        for &c in &channels_sorted {
            tensor.set(t, c, rng.sign() * profile.spike_magnitude);
            planted.push((t, c));
        }
    }
    Ok(OutlierActivations {
        tensor,
        planted,
        empty_profile: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Entry {
    pub token: usize,
    pub channel: usize,
    pub value: f32,
}

/// Median of `|x|` over every entry; zero for an empty tensor.
pub fn median_abs(x: &Tensor) -> f32 {
    let mut v: Vec<f32> = x.data().iter().map(|a| a.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Entries passing both the absolute and the median-relative threshold,
/// in row-major order.
pub fn detect_massive(x: &Tensor) -> Vec<Entry> {
    let floor = MASSIVE_MEDIAN_RATIO * median_abs(x);
    let cols = x.cols();
    x.data()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > MASSIVE_ABS_THRESHOLD && v.abs() > floor)
        .map(|(i, &value)| Entry {
            token: i / cols,
            channel: i % cols,
            value,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MagnitudeReport {
    pub max: f32,
    pub median: f32,
    pub per_channel_max: Vec<f32>,
    pub per_token_max: Vec<f32>,
    /// Largest entries by magnitude, descending.
    pub top: Vec<Entry>,
}

pub fn magnitude_report(x: &Tensor, top_k: usize) -> Result<MagnitudeReport> {
    if x.is_empty() {
        return Err(Error::Empty {
            context: "magnitude report input",
        });
    }
    let cols = x.cols();
    let mut per_channel_max = alloc::vec![0.0f32; cols];
    let mut per_token_max = Vec::with_capacity(x.rows());
    for row in x.rows_iter() {
        let mut m = 0.0f32;
        for (c, v) in per_channel_max.iter_mut().zip(row) {
            *c = c.max(v.abs());
            m = m.max(v.abs());
        }
        per_token_max.push(m);
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    let data = x.data();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let top = order
        .into_iter()
        .take(top_k)
        .map(|i| Entry {
            token: i / cols,
            channel: i % cols,
            value: data[i],
        })
        .collect();
    Ok(MagnitudeReport {
        max: x.abs_max(),
        median: median_abs(x),
        per_channel_max,
        per_token_max,
        top,
    })
}

/// Trigger token ids of a circuit built from `profile` for `vocab` tokens.
pub fn trigger_tokens(profile: &OutlierProfile, vocab: usize) -> core::ops::Range<u32> {
    0..profile.spiked_count(vocab) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitInfo {
    pub layer: usize,
    pub triggers: core::ops::Range<u32>,
    /// Outlier direction in the residual stream, unit norm.
    pub direction: Vec<f32>,
    /// Projection of the trigger tokens' feed-forward input on `direction`.
    pub trigger_response: f32,
    /// Later layers whose attention sinks onto trigger tokens.
    pub sink_layers: Vec<usize>,
}

/// Wires a massive-activation circuit into the model.
///
/// Trigger tokens get embeddings along a random unit direction `u`, which
/// is projected out of every other embedding. The gate and up columns of the
/// profile's channels in `layer` read `u`, so trigger tokens produce a
/// down-projection input of `±spike_magnitude` there while other tokens stay
/// near the floor. Every later layer gets a rank-one query/key term that
/// makes ordinary tokens attend to trigger tokens, whose residual stream is
/// dominated by the spike output: the attention-sink role massive
/// activations play in trained models. An empty profile leaves the model
/// untouched.
pub fn inject_outlier_circuit(
    model: &mut TinyModel,
    profile: &OutlierProfile,
    layer: usize,
    rng: &mut Rng,
) -> Result<Option<CircuitInfo>> {
    if model.state != TransformState::None || model.norms_fused {
        return Err(Error::InvalidState("outlier circuits need an untransformed model".into()));
    }
    profile.validate()?;
    if profile.is_empty() {
        return Ok(None);
    }
    if layer >= model.layers.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "layer {layer} out of range for {} layers",
            model.layers.len()
        )));
    }
    let (d, m, vocab) = (model.config.hidden, model.config.intermediate, model.config.vocab);
    profile.check_channels(m)?;
    let triggers = trigger_tokens(profile, vocab);
    if triggers.end as usize >= vocab {
        return Err(Error::InvalidArgument("outlier triggers would cover the whole vocabulary".into()));
    }
    if d < 3 {
        return Err(Error::InvalidArgument("outlier circuits need a hidden size of at least 4".into()));
    }
    let signs: Vec<f32> = (0..profile.channel_indices.len())
        .map(|k| if k % 2 == 0 { 1.0 } else { -1.0 })
        .collect();

    let u = unit(random_vec(d, rng), &[]);
    // Direction of the spike's contribution to the residual stream.
    let mut spike_out = alloc::vec![0.0f32; d];
    for (&j, sg) in profile.channel_indices.iter().zip(&signs) {
        for (o, w) in spike_out.iter_mut().zip(model.layers[layer].ffn.w_down.row(j)) {
            *o += sg * w;
        }
    }
    let spike_dir = unit(spike_out, &[]);
    // Shared component of ordinary tokens, read by sink queries.
    let common = unit(random_vec(d, rng), &[&u, &spike_dir]);

    let sqrt_d = libm::sqrtf(d as f32);
    for t in 0..vocab {
        let row = model.embedding.row_mut(t);
        if triggers.contains(&(t as u32)) {
            row.iter_mut().zip(&u).for_each(|(r, v)| *r = TRIGGER_EMBED_SCALE * sqrt_d * v);
        } else {
            let p = dot(row, &u);
            row.iter_mut()
                .zip(&u)
                .zip(&common)
                .for_each(|((r, v), c)| *r += COMMON_EMBED_SCALE * c - p * v);
        }
    }

    let probe = probe_tokens(&triggers, vocab);
    let is_trigger = |i: usize| triggers.contains(&probe[i]);
    let r = mean_projection(model, &probe, Site::new(layer, Proj::Gate), &u, is_trigger)?;
    if !(r.is_finite() && r.abs() > 1e-3) {
        return Err(Error::InvalidArgument(alloc::format!(
            "trigger response {r} too weak to drive a spike"
        )));
    }
    let gate = GATE_DRIVE / r;
    let up = profile.spike_magnitude / (crate::model::silu(GATE_DRIVE) * r);
    if !(gate.is_finite() && up.is_finite()) || up.abs() > f32::MAX / 1e6 {
        return Err(Error::InvalidArgument(alloc::format!(
            "spike magnitude {} unattainable in float range",
            profile.spike_magnitude
        )));
    }
    let ffn = &mut model.layers[layer].ffn;
    for (&j, sg) in profile.channel_indices.iter().zip(&signs) {
        ffn.w_down.row_mut(j).iter_mut().for_each(|w| *w *= SPIKE_ROW_SCALE);
        for i in 0..d {
            ffn.w_gate.set(i, j, gate * u[i]);
            ffn.w_up.set(i, j, sg * up * u[i]);
        }
    }

    let mut sink_layers = Vec::new();
    for l in layer + 1..model.layers.len() {
        let site = Site::new(l, Proj::Q);
        let rq = mean_projection(model, &probe, site, &common, |i| !is_trigger(i))?;
        let rk = mean_projection(model, &probe, site, &spike_dir, is_trigger)?;
        if !(rq.is_finite() && rk.is_finite()) || rq.abs() < 1e-3 || rk.abs() < 1e-3 {
            continue;
        }
        let heads = model.layers[l].attn.heads;
        let head_dim = d / heads;
        // Key direction with unit norm inside every head.
        let mut key = random_vec(d, rng);
        for h in key.chunks_mut(head_dim) {
            let n = libm::sqrtf(dot(h, h));
            h.iter_mut().for_each(|v| *v /= n);
        }
        let g = libm::sqrtf(SINK_LOGIT * libm::sqrtf(head_dim as f32) / (rq * rk).abs());
        let (gq, gk) = (g * rq.signum(), g * rk.signum());
        let attn = &mut model.layers[l].attn;
        for i in 0..d {
            for (c, kv) in key.iter().enumerate() {
                attn.w_q.set(i, c, attn.w_q.get(i, c) + gq * common[i] * kv);
                attn.w_k.set(i, c, attn.w_k.get(i, c) + gk * spike_dir[i] * kv);
            }
        }
        sink_layers.push(l);
    }

    Ok(Some(CircuitInfo {
        layer,
        triggers,
        direction: u,
        trigger_response: r,
        sink_layers,
    }))
}

/// A trigger first, then ordinary tokens with every trigger once in between.
fn probe_tokens(triggers: &core::ops::Range<u32>, vocab: usize) -> Vec<u32> {
    let ordinary = vocab as u32 - triggers.end;
    let mut probe = alloc::vec![triggers.start];
    for t in triggers.clone() {
        for k in 0..4 {
            probe.push(triggers.end + (t * 4 + k) % ordinary);
        }
        probe.push(t);
    }
    probe
}

fn mean_projection(
    model: &TinyModel,
    tokens: &[u32],
    site: Site,
    direction: &[f32],
    keep: impl Fn(usize) -> bool,
) -> Result<f32> {
    let mut obs = Projection {
        site,
        direction,
        values: Vec::new(),
    };
    model.forward(tokens, crate::model::Mode::Float, &mut obs)?;
    let kept: Vec<f32> = obs
        .values
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, v)| *v)
        .collect();
    Ok(kept.iter().sum::<f32>() / kept.len().max(1) as f32)
}

fn random_vec(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.normal()).collect()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalised `v` after removing its components along the unit vectors in `against`.
fn unit(mut v: Vec<f32>, against: &[&[f32]]) -> Vec<f32> {
    for a in against {
        let p = dot(&v, a);
        v.iter_mut().zip(a.iter()).for_each(|(x, y)| *x -= p * y);
    }
    let n = libm::sqrtf(dot(&v, &v));
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Records `x·direction` for each row reaching one projection.
struct Projection<'a> {
    site: Site,
    direction: &'a [f32],
    values: Vec<f32>,
}

impl Observer for Projection<'_> {
    fn projection_input(&mut self, site: Site, x: &Tensor) {
        if site == self.site {
            for row in x.rows_iter() {
                self.values.push(dot(row, self.direction));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TapRecorder};

    #[test]
    fn single_spike() {
        let mut rng = Rng::seed_from(3);
        let p = OutlierProfile {
            channel_indices: alloc::vec![5],
            token_fraction: 1.0 / 64.0,
            ..OutlierProfile::default()
        };
        let out = gen_outlier_activations(64, 32, &p, &mut rng).unwrap();
        let big: Vec<_> = out.tensor.data().iter().filter(|v| v.abs() == 1400.0).collect();
        assert_eq!(big.len(), 1);
        assert_eq!(out.planted.len(), 1);
        let med = median_abs(&out.tensor);
        assert!((med / (0.02 * MEDIAN_ABS_NORMAL) - 1.0).abs() < 0.1, "median {med}");
        let hits = detect_massive(&out.tensor);
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].token, hits[0].channel), out.planted[0]);
        let rep = magnitude_report(&out.tensor, 1).unwrap();
        assert_eq!(rep.top[0].value.abs(), 1400.0);
        assert_eq!((rep.top[0].token, rep.top[0].channel), out.planted[0]);
    }

    #[test]
    fn full_fraction_spikes_every_token() {
        let mut rng = Rng::seed_from(4);
        let p = OutlierProfile {
            channel_indices: alloc::vec![0, 9],
            token_fraction: 1.0,
            ..OutlierProfile::default()
        };
        let out = gen_outlier_activations(10, 64, &p, &mut rng).unwrap();
        assert_eq!(out.planted.len(), 20);
        for t in 0..10 {
            assert_eq!(out.tensor.get(t, 0).abs(), 1400.0);
            assert_eq!(out.tensor.get(t, 9).abs(), 1400.0);
        }
    }

    #[test]
    fn empty_profile_flags_plain_noise() {
        let mut rng = Rng::seed_from(5);
        let out = gen_outlier_activations(8, 8, &OutlierProfile::default(), &mut rng).unwrap();
        assert!(out.empty_profile);
        assert!(out.planted.is_empty());
        assert!(out.tensor.abs_max() < 1.0);
    }

    #[test]
    fn channel_out_of_range() {
        let mut rng = Rng::seed_from(5);
        let p = OutlierProfile::new(alloc::vec![8]);
        assert!(gen_outlier_activations(8, 8, &p, &mut rng).is_err());
    }

    #[test]
    fn detector_thresholds() {
        assert!(detect_massive(&Tensor::zeros(&[4, 4])).is_empty());
        let mut x = Tensor::new(alloc::vec![1, 5], alloc::vec![1.0; 5]).unwrap();
        x.set(0, 0, 150.0);
        assert!(detect_massive(&x).is_empty());
        // Exactly at the thresholds: strict inequalities reject.
        let mut x = Tensor::new(alloc::vec![1, 5], alloc::vec![0.1; 5]).unwrap();
        x.set(0, 0, 100.0);
        assert!(detect_massive(&x).is_empty());
        x.set(0, 0, 100.5);
        assert_eq!(detect_massive(&x).len(), 1);
        let mut x = Tensor::new(alloc::vec![1, 5], alloc::vec![0.2; 5]).unwrap();
        x.set(0, 0, 200.0);
        assert!(detect_massive(&x).is_empty());
        x.set(0, 0, 200.5);
        assert_eq!(detect_massive(&x).len(), 1);
    }

    #[test]
    fn constant_tensor_report() {
        let x = Tensor::new(alloc::vec![3, 3], alloc::vec![-2.5; 9]).unwrap();
        let r = magnitude_report(&x, 2).unwrap();
        assert_eq!(r.max, 2.5);
        assert_eq!(r.median, 2.5);
        assert_eq!(r.per_channel_max, alloc::vec![2.5; 3]);
        assert!(magnitude_report(&Tensor::zeros(&[0, 3]), 1).is_err());
    }

    fn config() -> ModelConfig {
        ModelConfig {
            vocab: 64,
            hidden: 32,
            intermediate: 128,
            layers: 2,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn circuit_produces_massive_outliers() {
        let mut rng = Rng::seed_from(6);
        let mut model = TinyModel::random(config(), &mut rng).unwrap();
        let p = OutlierProfile {
            channel_indices: alloc::vec![3, 40],
            token_fraction: 0.05,
            ..OutlierProfile::default()
        };
        let info = inject_outlier_circuit(&mut model, &p, 1, &mut rng).unwrap().unwrap();
        let tokens: Vec<u32> = (0..48).map(|_| rng.below(64) as u32).chain([0, 1]).collect();
        let mut taps = TapRecorder::new();
        model.forward(&tokens, crate::model::Mode::Float, &mut taps).unwrap();
        let tap = &taps.layer(1).next().unwrap().pre_hadamard;
        let hits = detect_massive(tap);
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|h| p.channel_indices.contains(&h.channel)));
        assert!(hits.iter().all(|h| info.triggers.contains(&tokens[h.token])));
        let peak = hits.iter().map(|h| h.value.abs()).fold(0.0f32, f32::max);
        assert!((peak / 1400.0 - 1.0).abs() < 0.25, "peak {peak}");
    }

    #[test]
    fn empty_circuit_is_noop() {
        let mut rng = Rng::seed_from(7);
        let mut model = TinyModel::random(config(), &mut rng).unwrap();
        let before = model.clone();
        assert!(inject_outlier_circuit(&mut model, &OutlierProfile::default(), 0, &mut rng)
            .unwrap()
            .is_none());
        assert_eq!(model, before);
    }
}
