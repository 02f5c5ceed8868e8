//! Building blocks for paired pipeline comparisons: token streams, variant
//! construction in the order smooth → fuse norms → rotate, and logit metrics.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::model::{
    fuse_rmsnorm, rotate_model, Mode, Observer, Proj, QuantConfig, RotateOptions, Site, TapRecorder, TinyModel,
};
use crate::numerics::{Rng, Tensor};
use crate::outliers::{magnitude_report, MagnitudeReport};
use crate::quant::QuantSpec;
use crate::rotation::random_hadamard;
use crate::smoothing::{smooth_model, smoothing_factors, CalibrationStats, SmoothingFactors};
use crate::weight_quant::{quantize_model_weights, HessianObserver, LayerWeightReport, WeightMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Pipeline {
    Baseline,
    Smooth,
    Rotate,
    #[cfg_attr(feature = "serde", serde(rename = "smoothrot"))]
    SmoothRot,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::Baseline, Pipeline::Smooth, Pipeline::Rotate, Pipeline::SmoothRot];

    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Smooth => "smooth",
            Pipeline::Rotate => "rotate",
            Pipeline::SmoothRot => "smoothrot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn smooths(&self) -> bool {
        matches!(self, Pipeline::Smooth | Pipeline::SmoothRot)
    }

    pub fn rotates(&self) -> bool {
        matches!(self, Pipeline::Rotate | Pipeline::SmoothRot)
    }
}

/// Zipf-distributed tokens over the non-trigger vocabulary, with trigger
/// tokens mixed in at `trigger_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub triggers: Range<u32>,
    pub trigger_rate: f32,
    pub zipf_exponent: f64,
    /// Open every sequence with the first trigger token.
    pub bos: bool,
}

impl CorpusSpec {
    pub fn new(vocab: usize, triggers: Range<u32>, trigger_rate: f32) -> Self {
        Self {
            vocab,
            triggers,
            trigger_rate,
            zipf_exponent: 1.0,
            bos: true,
        }
    }
}

pub fn synthetic_corpus(spec: &CorpusSpec, seqs: usize, len: usize, rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
    let first = spec.triggers.end as usize;
    if first >= spec.vocab || spec.triggers.start != 0 && !spec.triggers.is_empty() {
        return Err(Error::InvalidArgument(
            "triggers must be a prefix of the vocabulary leaving ordinary tokens".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.trigger_rate) {
        return Err(Error::InvalidArgument("trigger rate outside [0, 1]".into()));
    }
    let mut cdf = Vec::with_capacity(spec.vocab - first);
    let mut acc = 0.0f64;
    for r in 1..=spec.vocab - first {
        acc += libm::pow(r as f64, -spec.zipf_exponent);
        cdf.push(acc);
    }
    let total = acc;
    let n_trig = spec.triggers.len();
    let mut out = Vec::with_capacity(seqs);
    for _ in 0..seqs {
        let seq = (0..len)
            .map(|i| {
                if i == 0 && spec.bos && n_trig > 0 {
                    spec.triggers.start
                } else if n_trig > 0 && rng.uniform() < spec.trigger_rate {
                    rng.below(n_trig) as u32
                } else {
                    let u = rng.uniform() as f64 * total;
                    let r = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                    (first + r) as u32
                }
            })
            .collect();
        out.push(seq);
    }
    Ok(out)
}

/// Uniform over the whole vocabulary.
pub fn random_token_corpus(vocab: usize, seqs: usize, len: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
    (0..seqs)
        .map(|_| (0..len).map(|_| rng.below(vocab) as u32).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantOptions {
    pub pipeline: Pipeline,
    pub alpha: f32,
    pub rotation_seed: u64,
    pub rotate: RotateOptions,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub model: TinyModel,
    pub factors: Option<Vec<SmoothingFactors>>,
}

/// Float-equivalent transformed model. `stats` is required when the
/// pipeline smooths.
pub fn build_variant(base: &TinyModel, stats: Option<&[CalibrationStats]>, opts: &VariantOptions) -> Result<Variant> {
    let mut model = base.clone();
    let mut factors = None;
    if opts.pipeline.smooths() {
        let stats = stats.ok_or_else(|| Error::InvalidArgument("smoothing needs calibration statistics".into()))?;
        let f = smoothing_factors(&model, stats, opts.alpha)?;
        smooth_model(&mut model, &f)?;
        factors = Some(f);
    }
    if opts.pipeline == Pipeline::Baseline {
        return Ok(Variant { model, factors });
    }
    fuse_rmsnorm(&mut model)?;
    if opts.pipeline.rotates() {
        let mut rng = Rng::seed_from(opts.rotation_seed);
        let q = random_hadamard(model.config.hidden, &mut rng)?;
        rotate_model(&mut model, &q, opts.rotate)?;
    }
    Ok(Variant { model, factors })
}

/// Replaces the weights of `model` by their quantized versions. GPTQ
/// Hessians come from a float pass of `model` over `calib`.
pub fn quantize_weights(
    model: &TinyModel,
    cfg: &QuantConfig,
    calib: &[Vec<u32>],
) -> Result<(TinyModel, Vec<LayerWeightReport>)> {
    let Some(wcfg) = &cfg.weight else {
        return Ok((model.clone(), Vec::new()));
    };
    let hessians = if wcfg.method == WeightMethod::Gptq {
        let mut obs = HessianObserver::new();
        for seq in calib {
            model.forward(seq, Mode::Float, &mut obs)?;
        }
        Some(obs)
    } else {
        None
    };
    quantize_model_weights(model, wcfg, hessians.as_ref())
}

/// Builds, quantizes and scores variants of one base model.
///
/// With RTN weights, the attention and gate projections are quantized once
/// per rotation setting and reused: smoothing only touches the up and down
/// projections, and RTN depends on nothing but the weight itself.
pub struct Evaluator<'a> {
    pub base: &'a TinyModel,
    pub stats: Option<&'a [CalibrationStats]>,
    pub calib: &'a [Vec<u32>],
    pub quant: &'a QuantConfig,
    pub rotation_seed: u64,
    pub rotate: RotateOptions,
    shared: [Option<TinyModel>; 2],
}

impl<'a> Evaluator<'a> {
    pub fn new(
        base: &'a TinyModel,
        stats: Option<&'a [CalibrationStats]>,
        calib: &'a [Vec<u32>],
        quant: &'a QuantConfig,
        rotation_seed: u64,
    ) -> Self {
        Self {
            base,
            stats,
            calib,
            quant,
            rotation_seed,
            rotate: RotateOptions::default(),
            shared: [None, None],
        }
    }

    pub fn variant(&self, pipeline: Pipeline, alpha: f32) -> Result<Variant> {
        build_variant(
            self.base,
            self.stats,
            &VariantOptions {
                pipeline,
                alpha,
                rotation_seed: self.rotation_seed,
                rotate: self.rotate,
            },
        )
    }

    /// Weight-quantized copy of a variant built by [`Evaluator::variant`].
    pub fn quantize(&mut self, variant: &TinyModel, pipeline: Pipeline) -> Result<(TinyModel, Vec<LayerWeightReport>)> {
        let reusable = matches!(&self.quant.weight, Some(w) if w.method == WeightMethod::Rtn);
        if !reusable {
            return quantize_weights(variant, self.quant, self.calib);
        }
        let wcfg = self.quant.weight.as_ref().expect("checked above");
        let slot = pipeline.rotates() as usize;
        if self.shared[slot].is_none() {
            let (q, _) = quantize_weights(variant, self.quant, self.calib)?;
            self.shared[slot] = Some(q);
        }
        let shared = self.shared[slot].as_ref().expect("filled above");
        let mut model = variant.clone();
        for (l, s) in model.layers.iter_mut().zip(&shared.layers) {
            l.attn = s.attn.clone();
            l.ffn.w_gate = s.ffn.w_gate.clone();
        }
        let mut cfg = wcfg.clone();
        cfg.sites.retain(|p| matches!(p, Proj::Up | Proj::Down));
        quantize_model_weights(&model, &cfg, None)
    }

    /// Quantized-vs-reference logit metrics of one variant on `seqs`.
    pub fn score(&mut self, pipeline: Pipeline, alpha: f32, seqs: &[Vec<u32>], reference: &Tensor) -> Result<LogitMetrics> {
        let v = self.variant(pipeline, alpha)?;
        let (q, _) = self.quantize(&v.model, pipeline)?;
        let (logits, _) = quantized_logits(&q, self.quant, seqs)?;
        logit_metrics(reference, &logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LogitMetrics {
    pub mse: f64,
    /// `‖test − ref‖_F / ‖ref‖_F`.
    pub rel_error: f64,
    /// Mean over tokens of `KL(softmax(ref) ‖ softmax(test))`.
    pub kl: f64,
}

pub fn logit_metrics(reference: &Tensor, test: &Tensor) -> Result<LogitMetrics> {
    let mse = test.mse(reference)?;
    let rel_error = test.rel_error(reference)?;
    let mut kl = 0.0;
    for (p, q) in reference.rows_iter().zip(test.rows_iter()) {
        let lp = log_softmax(p);
        let lq = log_softmax(q);
        kl += lp
            .iter()
            .zip(&lq)
            .map(|(a, b)| libm::exp(*a) * (a - b))
            .sum::<f64>();
    }
    let rows = reference.rows().max(1) as f64;
    Ok(LogitMetrics {
        mse,
        rel_error,
        kl: kl / rows,
    })
}

fn log_softmax(x: &[f32]) -> Vec<f64> {
    let m = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64));
    let lse = m + libm::log(x.iter().map(|v| libm::exp(*v as f64 - m)).sum::<f64>());
    x.iter().map(|v| *v as f64 - lse).collect()
}

/// `(m_rot − m_srot) / (m_rot − m_float)`; `m_float` is 0 for metrics
/// measured against the float model. Zero when the baseline gap is zero.
pub fn gap_closure(m_rot: f64, m_srot: f64, m_float: f64) -> f64 {
    let gap = m_rot - m_float;
    if gap == 0.0 {
        0.0
    } else {
        (m_rot - m_srot) / gap
    }
}

/// Mean squared activation-quantization error at every projection input.
#[derive(Debug, Clone)]
pub struct ActQuantObserver {
    spec: QuantSpec,
    sums: BTreeMap<Site, (f64, usize)>,
    error: Option<Error>,
}

impl ActQuantObserver {
    pub fn new(spec: QuantSpec) -> Self {
        Self {
            spec,
            sums: BTreeMap::new(),
            error: None,
        }
    }

    pub fn mse(&self) -> Result<BTreeMap<Site, f64>> {
        if let Some(e) = &self.error {
            return Err(e.clone());
        }
        Ok(self
            .sums
            .iter()
            .map(|(k, (s, n))| (*k, if *n == 0 { 0.0 } else { s / *n as f64 }))
            .collect())
    }
}

impl Observer for ActQuantObserver {
    fn projection_input(&mut self, site: Site, x: &Tensor) {
        // Q/K/V and gate/up share one input; count it once.
        if matches!(site.proj, Proj::K | Proj::V | Proj::Up) || self.error.is_some() {
            return;
        }
        match crate::quant::fake_quant(x, &self.spec).and_then(|q| q.mse(x)) {
            Ok(m) => {
                let e = self.sums.entry(site).or_insert((0.0, 0));
                e.0 += m * x.len() as f64;
                e.1 += x.len();
            }
            Err(e) => self.error = Some(e),
        }
    }
}

/// Quantized forward over `seqs`, returning stacked logits and the
/// activation-quantization error per projection input.
pub fn quantized_logits(
    model: &TinyModel,
    cfg: &QuantConfig,
    seqs: &[Vec<u32>],
) -> Result<(Tensor, BTreeMap<Site, f64>)> {
    match &cfg.act {
        Some(spec) => {
            let mut obs = ActQuantObserver::new(*spec);
            let logits = model.forward_batch(seqs, Mode::Quantized(cfg), &mut obs)?;
            Ok((logits, obs.mse()?))
        }
        None => Ok((
            model.forward_batch(seqs, Mode::Quantized(cfg), &mut crate::model::NoObserver)?,
            BTreeMap::new(),
        )),
    }
}

/// Magnitudes of each layer's quantizer-facing down-projection input in a
/// float pass over `seqs`.
pub fn down_proj_magnitudes(model: &TinyModel, seqs: &[Vec<u32>], top_k: usize) -> Result<Vec<MagnitudeReport>> {
    let mut taps = TapRecorder::new();
    for s in seqs {
        model.forward(s, Mode::Float, &mut taps)?;
    }
    (0..model.layers.len())
        .map(|l| {
            let mut data = Vec::new();
            let mut rows = 0;
            for t in taps.layer(l) {
                data.extend_from_slice(t.pre_quant.data());
                rows += t.pre_quant.rows();
            }
            magnitude_report(&Tensor::new(alloc::vec![rows, model.config.intermediate], data)?, top_k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::smoothing::collect_act_stats;

    #[test]
    fn corpus_respects_triggers() {
        let mut rng = Rng::seed_from(1);
        let spec = CorpusSpec {
            bos: false,
            ..CorpusSpec::new(64, 0..4, 0.1)
        };
        let c = synthetic_corpus(&spec, 20, 50, &mut rng).unwrap();
        let with_bos = synthetic_corpus(&CorpusSpec::new(64, 0..4, 0.1), 3, 5, &mut rng).unwrap();
        assert!(with_bos.iter().all(|s| s[0] == 0));
        let all: Vec<u32> = c.concat();
        assert!(all.iter().all(|&t| t < 64));
        let trig = all.iter().filter(|&&t| t < 4).count() as f32 / all.len() as f32;
        assert!((trig - 0.1).abs() < 0.03);
        // Zipf: the first ordinary token is the most frequent.
        let count = |id| all.iter().filter(|&&t| t == id).count();
        assert!(count(4) > count(30));
    }

    #[test]
    fn corpus_rejects_full_trigger_vocab() {
        let mut rng = Rng::seed_from(1);
        assert!(synthetic_corpus(&CorpusSpec::new(4, 0..4, 0.1), 1, 1, &mut rng).is_err());
    }

    #[test]
    fn variants_are_float_equivalent() {
        let mut rng = Rng::seed_from(2);
        let cfg = ModelConfig {
            vocab: 32,
            hidden: 16,
            intermediate: 64,
            ..ModelConfig::default()
        };
        let base = TinyModel::random(cfg, &mut rng).unwrap();
        let calib = random_token_corpus(32, 4, 16, &mut rng);
        let stats = collect_act_stats(&base, &calib, "random").unwrap();
        let tokens = &calib[0];
        let want = base.forward(tokens, Mode::Float, &mut crate::model::NoObserver).unwrap();
        for p in Pipeline::ALL {
            let v = build_variant(
                &base,
                Some(&stats),
                &VariantOptions {
                    pipeline: p,
                    alpha: 0.5,
                    rotation_seed: 9,
                    rotate: RotateOptions::default(),
                },
            )
            .unwrap();
            assert_eq!(v.factors.is_some(), p.smooths());
            let got = v.model.forward(tokens, Mode::Float, &mut crate::model::NoObserver).unwrap();
            assert!(got.rel_inf_error(&want).unwrap() <= 1e-5, "{}", p.as_str());
        }
    }

    #[test]
    fn cached_quantization_matches_full() {
        let mut rng = Rng::seed_from(4);
        let cfg = ModelConfig {
            vocab: 32,
            hidden: 16,
            intermediate: 64,
            ..ModelConfig::default()
        };
        let base = TinyModel::random(cfg, &mut rng).unwrap();
        let calib = random_token_corpus(32, 2, 16, &mut rng);
        let stats = collect_act_stats(&base, &calib, "random").unwrap();
        let quant = QuantConfig::w4a4kv4(16);
        let mut ev = Evaluator::new(&base, Some(&stats), &calib, &quant, 3);
        for (p, a) in [(Pipeline::Rotate, 0.0), (Pipeline::SmoothRot, 0.3), (Pipeline::SmoothRot, 0.6), (Pipeline::Smooth, 0.5)] {
            let v = ev.variant(p, a).unwrap();
            let (cached, _) = ev.quantize(&v.model, p).unwrap();
            let (full, _) = quantize_weights(&v.model, &quant, &calib).unwrap();
            assert_eq!(cached, full);
        }
    }

    #[test]
    fn metrics_of_identical_logits_are_zero() {
        let mut rng = Rng::seed_from(3);
        let x = rng.normal_tensor(4, 10, 1.0);
        let m = logit_metrics(&x, &x).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.rel_error, 0.0);
        assert!(m.kl.abs() < 1e-12);
        let y = x.map(|v| v + 0.5);
        let m = logit_metrics(&x, &y).unwrap();
        assert!((m.mse - 0.25).abs() < 1e-6);
        // Softmax is shift invariant.
        assert!(m.kl.abs() < 1e-9);
    }

    #[test]
    fn gap_closure_is_affine_invariant() {
        let g = gap_closure(8.33, 7.51, 5.47);
        assert!((g - 0.2867).abs() < 1e-3);
        let t = |v: f64| 3.0 * v + 7.0;
        assert!((gap_closure(t(8.33), t(7.51), t(5.47)) - g).abs() < 1e-12);
        assert_eq!(gap_closure(1.0, 1.0, 1.0), 0.0);
    }
}
