//! Experiment orchestration: model generation, calibration, the four
//! pipeline variants, metrics and comparison tables.
//!
//! Every random draw derives from `ExperimentConfig::seed`: the model and
//! its outlier circuit from the root stream, calibration, test and
//! validation tokens from fixed child streams.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::Value;
use smoothrot_core::experiment::{
    gap_closure, logit_metrics, quantize_weights, random_token_corpus, synthetic_corpus, CorpusSpec, Evaluator,
    Pipeline, Variant,
};
use smoothrot_core::model::{
    fuse_rmsnorm, rotate_model, Mode, NoObserver, QuantConfig, RotateOptions, TapRecorder, TinyModel,
};
use smoothrot_core::outliers::{inject_outlier_circuit, magnitude_report};
use smoothrot_core::rotation::OrthogonalTransform;
use smoothrot_core::smoothing::{
    alpha_search, collect_act_stats, normalize_down_weight_maxima, smooth_model, smoothing_factors, AlphaSearch,
    CalibrationStats,
};
use smoothrot_core::{Rng, Tensor};

use crate::archive::Archive;
use crate::config::{CalibSource, ExperimentConfig, Metric, WeightBackend};
use crate::error::{Error, Result, StageExt};
use crate::persist::{stats_from_archive, CircuitManifest};
use crate::report::{
    AblationRow, AblationTable, CalibrationSummary, Check, ComparisonRow, ComparisonTable, LayerMagnitude,
    ModelSummary, RunReport, StageError, Status, SweepRow, SweepTable, Timing, ToolInfo, VariantReport,
};

const STREAM_CALIB: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_VAL: u64 = 3;

/// Relative ∞-norm bound for float-mode invariance of transformed variants.
pub const INVARIANCE_TOL: f64 = 1e-5;

/// Random model for `cfg` with its outlier circuit wired in.
pub fn generate_model(cfg: &ExperimentConfig) -> Result<(TinyModel, Option<CircuitManifest>)> {
    let mut rng = Rng::seed_from(cfg.seed);
    let mut model = TinyModel::random(cfg.model_config(), &mut rng)?;
    let mut circuit = None;
    if cfg.outlier_channels > 0 {
        let channels = rng.choose_distinct(cfg.intermediate, cfg.outlier_channels);
        let profile = cfg.outlier_profile(channels.clone());
        if let Some(info) = inject_outlier_circuit(&mut model, &profile, cfg.outlier_layer, &mut rng)? {
            circuit = Some(CircuitManifest::new(&info, &channels, cfg.spike_magnitude));
        }
    }
    if cfg.normalize_weight_maxima {
        normalize_down_weight_maxima(&mut model)?;
    }
    Ok((model, circuit))
}

pub fn corpus_spec(cfg: &ExperimentConfig, circuit: Option<&CircuitManifest>) -> CorpusSpec {
    let triggers = circuit.map_or(0..0, |c| c.trigger_range());
    CorpusSpec::new(cfg.vocab, triggers, cfg.token_fraction)
}

/// Calibration tokens for `source`. The archive source has no tokens of its
/// own; it falls back to synthetic ones for GPTQ Hessians.
pub fn calibration_tokens(cfg: &ExperimentConfig, corpus: &CorpusSpec, source: CalibSource) -> Result<Vec<Vec<u32>>> {
    let mut rng = Rng::seed_from(cfg.seed).fork(STREAM_CALIB);
    Ok(match source {
        CalibSource::RandomTokens => random_token_corpus(cfg.vocab, cfg.calib_seqs, cfg.calib_len, &mut rng),
        CalibSource::Synthetic | CalibSource::Archive => {
            synthetic_corpus(corpus, cfg.calib_seqs, cfg.calib_len, &mut rng)?
        }
    })
}

/// Held-out evaluation sequences.
pub fn eval_tokens(cfg: &ExperimentConfig, corpus: &CorpusSpec) -> Result<Vec<Vec<u32>>> {
    let mut rng = Rng::seed_from(cfg.seed).fork(STREAM_TEST);
    Ok(synthetic_corpus(corpus, cfg.eval_seqs, cfg.eval_len, &mut rng)?)
}

pub fn load_stats(path: &Path, model: &TinyModel) -> Result<Vec<CalibrationStats>> {
    let stats = stats_from_archive(&Archive::load(path)?)?;
    if stats.len() != model.layers.len()
        || stats.iter().any(|s| s.act_absmax.len() != model.config.intermediate)
    {
        return Err(Error::Contents(format!(
            "{}: statistics do not match a {}-layer model with {} channels",
            path.display(),
            model.layers.len(),
            model.config.intermediate
        )));
    }
    Ok(stats)
}

/// Activation statistics for `source`.
pub fn calibrate(
    cfg: &ExperimentConfig,
    model: &TinyModel,
    source: CalibSource,
    tokens: &[Vec<u32>],
) -> Result<Vec<CalibrationStats>> {
    match source {
        CalibSource::Archive => {
            let path = cfg
                .calib_archive
                .as_ref()
                .ok_or_else(|| Error::config("calib_source = \"archive\" needs calib_archive"))?;
            load_stats(path, model)
        }
        _ => Ok(collect_act_stats(model, tokens, source.as_str())?),
    }
}

/// Everything shared by the variants of one experiment.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub base: TinyModel,
    pub circuit: Option<CircuitManifest>,
    pub corpus: CorpusSpec,
    pub calib: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
    pub stats: Option<Vec<CalibrationStats>>,
    pub quant: QuantConfig,
    pub ref_val: Tensor,
    pub ref_test: Tensor,
}

impl Setup {
    /// Builds the model, draws token splits, computes float references and,
    /// when a variant smooths, calibration statistics.
    pub fn prepare(cfg: &ExperimentConfig, timing: &mut Timing) -> Result<Self> {
        cfg.validate()?;
        let quant = cfg.quant_config()?;
        let t = Instant::now();
        let (base, circuit) = generate_model(cfg).stage("generate")?;
        lap(timing, "generate", t);

        let corpus = corpus_spec(cfg, circuit.as_ref());
        let test = eval_tokens(cfg, &corpus).stage("data")?;
        let val = synthetic_corpus(&corpus, cfg.val_seqs, cfg.val_len, &mut Rng::seed_from(cfg.seed).fork(STREAM_VAL))
            .stage("data")?;
        let calib = calibration_tokens(cfg, &corpus, cfg.calib_source).stage("data")?;

        let t = Instant::now();
        let stats = if cfg.smoothing_requested() {
            Some(calibrate(cfg, &base, cfg.calib_source, &calib).stage("calibrate")?)
        } else {
            None
        };
        lap(timing, "calibrate", t);

        let t = Instant::now();
        let ref_test = base.forward_batch(&test, Mode::Float, &mut NoObserver).stage("reference")?;
        let ref_val = base.forward_batch(&val, Mode::Float, &mut NoObserver).stage("reference")?;
        lap(timing, "reference", t);
        Ok(Self {
            cfg: cfg.clone(),
            base,
            circuit,
            corpus,
            calib,
            val,
            test,
            stats,
            quant,
            ref_val,
            ref_test,
        })
    }

    /// Calibration sequences fed to GPTQ Hessian collection.
    pub fn hessian_tokens(&self) -> &[Vec<u32>] {
        &self.calib[..self.cfg.gptq_seqs.min(self.calib.len())]
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        self.evaluator_with(self.stats.as_deref())
    }

    pub fn evaluator_with<'a>(&'a self, stats: Option<&'a [CalibrationStats]>) -> Evaluator<'a> {
        let mut ev = Evaluator::new(&self.base, stats, self.hessian_tokens(), &self.quant, self.cfg.rotation_seed());
        ev.rotate = rotate_options(&self.cfg);
        ev
    }

    /// Validation-split search for the migration strength of `pipeline`.
    pub fn search_alpha(&self, ev: &mut Evaluator<'_>, pipeline: Pipeline) -> Result<AlphaSearch> {
        Ok(alpha_search(&self.cfg.grid(), |a| {
            Ok(ev.score(pipeline, a, &self.val, &self.ref_val)?.mse)
        })?)
    }

    /// Alpha for a smoothing pipeline: the configured value or a search result.
    pub fn alpha_for(&self, ev: &mut Evaluator<'_>, pipeline: Pipeline) -> Result<(f32, Option<AlphaSearch>)> {
        match self.cfg.alpha {
            Some(a) => Ok((a, None)),
            None => {
                let s = self.search_alpha(ev, pipeline)?;
                Ok((s.best_alpha, Some(s)))
            }
        }
    }
}

fn lap(timing: &mut Timing, stage: &str, t: Instant) {
    *timing.stages.entry(stage.into()).or_insert(0.0) += t.elapsed().as_secs_f64();
}

pub fn rotate_options(cfg: &ExperimentConfig) -> RotateOptions {
    RotateOptions {
        o_proj_hadamard: cfg.o_proj_hadamard,
        ..RotateOptions::default()
    }
}

/// Applies `pipeline` in the fixed order smooth → fuse norms → rotate.
/// `rotation` is required by rotating pipelines and ignored otherwise.
pub fn apply_pipeline(
    base: &TinyModel,
    stats: Option<&[CalibrationStats]>,
    pipeline: Pipeline,
    alpha: f32,
    rotation: Option<&OrthogonalTransform>,
    opts: RotateOptions,
) -> Result<Variant> {
    let mut model = base.clone();
    let mut factors = None;
    if pipeline.smooths() {
        let stats = stats.ok_or_else(|| Error::config("smoothing needs calibration statistics"))?;
        let f = smoothing_factors(&model, stats, alpha)?;
        smooth_model(&mut model, &f)?;
        factors = Some(f);
    }
    if pipeline == Pipeline::Baseline {
        return Ok(Variant { model, factors });
    }
    fuse_rmsnorm(&mut model)?;
    if pipeline.rotates() {
        let q = rotation.ok_or_else(|| Error::config("rotating pipeline without a rotation"))?;
        rotate_model(&mut model, q, opts)?;
    }
    Ok(Variant { model, factors })
}

/// First-sequence down-projection inputs per layer, for surface plots.
pub type Surface = Vec<(usize, Tensor)>;

fn layer_magnitudes(taps: &TapRecorder, layers: usize, channels: usize, top_k: usize) -> Result<Vec<LayerMagnitude>> {
    (0..layers)
        .map(|l| {
            let mut data = Vec::new();
            for t in taps.layer(l) {
                data.extend_from_slice(t.pre_quant.data());
            }
            let rows = data.len() / channels.max(1);
            let x = Tensor::new(vec![rows, channels], data)?;
            Ok(LayerMagnitude {
                layer: l,
                report: magnitude_report(&x, top_k)?,
            })
        })
        .collect()
}

fn stage_error(stage: &str, e: impl std::fmt::Display) -> StageError {
    StageError {
        stage: stage.into(),
        message: e.to_string(),
    }
}

/// Builds, quantizes and measures one variant. Failures are recorded in
/// the returned report, never propagated.
pub fn evaluate_variant(
    setup: &Setup,
    pipeline: Pipeline,
    alpha: Option<f32>,
    timing: &mut Timing,
) -> (VariantReport, Option<Surface>) {
    let cfg = &setup.cfg;
    let want = |m: Metric| cfg.metrics.contains(&m);
    let mut r = VariantReport::new(pipeline, alpha.filter(|_| pipeline.smooths()));
    let fail = |r: &mut VariantReport, stage: &str, e: &dyn std::fmt::Display| {
        r.status = Status::Failed;
        r.error = Some(stage_error(stage, e));
        for m in &cfg.metrics {
            r.failed.insert(m.as_str().into(), format!("{stage} failed"));
        }
    };

    let t = Instant::now();
    let built = match apply_pipeline_seeded(setup, pipeline, alpha.unwrap_or(0.0)) {
        Ok(v) => v,
        Err(e) => {
            fail(&mut r, "transform", &e);
            return (r, None);
        }
    };
    lap(timing, "transform", t);

    let t = Instant::now();
    let mut taps = TapRecorder::new();
    let mut surface = None;
    match built.model.forward_batch(&setup.test, Mode::Float, &mut taps) {
        Ok(float) => {
            match float.rel_inf_error(&setup.ref_test) {
                Ok(e) => r.float_invariance = Some(e),
                Err(e) => {
                    r.failed.insert("float_invariance".into(), e.to_string());
                }
            }
            if want(Metric::DownProj) {
                match layer_magnitudes(&taps, cfg.layers, cfg.intermediate, cfg.top_k) {
                    Ok(m) => r.down_proj = Some(m),
                    Err(e) => {
                        r.failed.insert(Metric::DownProj.as_str().into(), e.to_string());
                    }
                }
            }
            surface = Some(
                (0..cfg.layers)
                    .filter_map(|l| taps.layer(l).next().map(|t| (l, t.pre_quant.clone())))
                    .collect(),
            );
        }
        Err(e) => {
            r.failed.insert("float_invariance".into(), e.to_string());
            r.failed.insert(Metric::DownProj.as_str().into(), e.to_string());
        }
    }
    drop(taps);
    lap(timing, "float_pass", t);

    let t = Instant::now();
    let quantized = match quantize_weights(&built.model, &setup.quant, setup.hessian_tokens()) {
        Ok(q) => q,
        Err(e) => {
            r.status = Status::Failed;
            r.error = Some(stage_error("weight_quant", &e));
            for m in [
                Metric::LogitMse,
                Metric::LogitRelError,
                Metric::LogitKl,
                Metric::ActQuantMse,
                Metric::WeightQuantMse,
                Metric::ProxyLoss,
            ] {
                if want(m) {
                    r.failed.insert(m.as_str().into(), "weight_quant failed".into());
                }
            }
            return (r, surface);
        }
    };
    lap(timing, "weight_quant", t);
    let (qmodel, wreports) = quantized;
    if setup.quant.weight.is_none() {
        for m in [Metric::WeightQuantMse, Metric::ProxyLoss] {
            if want(m) {
                r.skipped.insert(m.as_str().into(), "weight quantization disabled".into());
            }
        }
    } else {
        if want(Metric::WeightQuantMse) {
            r.weight_quant = Some(wreports.clone());
        }
        if want(Metric::ProxyLoss) {
            if cfg.weights == WeightBackend::Gptq {
                r.proxy_loss = Some(
                    wreports
                        .iter()
                        .filter_map(|w| w.proxy_loss.map(|p| (w.layer.clone(), p)))
                        .collect(),
                );
            } else {
                r.skipped
                    .insert(Metric::ProxyLoss.as_str().into(), "proxy loss is reported for the gptq backend".into());
            }
        }
    }

    let t = Instant::now();
    match smoothrot_core::experiment::quantized_logits(&qmodel, &setup.quant, &setup.test) {
        Ok((logits, act)) => {
            match logit_metrics(&setup.ref_test, &logits) {
                Ok(m) => {
                    if want(Metric::LogitMse) {
                        r.logit_mse = Some(m.mse);
                    }
                    if want(Metric::LogitRelError) {
                        r.logit_rel_error = Some(m.rel_error);
                    }
                    if want(Metric::LogitKl) {
                        r.logit_kl = Some(m.kl);
                    }
                }
                Err(e) => {
                    for m in [Metric::LogitMse, Metric::LogitRelError, Metric::LogitKl] {
                        if want(m) {
                            r.failed.insert(m.as_str().into(), e.to_string());
                        }
                    }
                }
            }
            if want(Metric::ActQuantMse) {
                if setup.quant.act.is_none() {
                    r.skipped
                        .insert(Metric::ActQuantMse.as_str().into(), "activation quantization disabled".into());
                } else {
                    r.act_quant_mse = Some(
                        act.into_iter()
                            .map(|(s, v)| (format!("layers.{}.{}", s.layer, s.proj.name()), v))
                            .collect(),
                    );
                }
            }
        }
        Err(e) => {
            r.error = Some(stage_error("eval", &e));
            for m in [Metric::LogitMse, Metric::LogitRelError, Metric::LogitKl, Metric::ActQuantMse] {
                if want(m) {
                    r.failed.insert(m.as_str().into(), e.to_string());
                }
            }
        }
    }
    lap(timing, "eval", t);
    if r.status == Status::Ok && !r.failed.is_empty() {
        r.status = Status::Partial;
    }
    (r, surface)
}

fn apply_pipeline_seeded(setup: &Setup, pipeline: Pipeline, alpha: f32) -> Result<Variant> {
    let q = if pipeline.rotates() {
        Some(seeded_rotation(&setup.cfg)?)
    } else {
        None
    };
    apply_pipeline(&setup.base, setup.stats.as_deref(), pipeline, alpha, q.as_ref(), rotate_options(&setup.cfg))
}

/// The random Hadamard every rotating variant of `cfg` uses.
pub fn seeded_rotation(cfg: &ExperimentConfig) -> Result<OrthogonalTransform> {
    let mut rng = Rng::seed_from(cfg.rotation_seed());
    Ok(smoothrot_core::rotation::random_hadamard(cfg.hidden, &mut rng)?)
}

/// Per-variant surfaces written next to a report.
pub type Surfaces = Vec<(Pipeline, Surface)>;

/// Runs every configured variant. Stage failures are recorded in the report.
pub fn run_experiment_with_surfaces(cfg: &ExperimentConfig) -> (RunReport, Surfaces) {
    let start = Instant::now();
    let mut report = RunReport {
        tool: ToolInfo::current(),
        config: cfg.clone(),
        warnings: cfg.warnings(),
        model: None,
        calibration: None,
        alpha_search: BTreeMap::new(),
        variants: Vec::new(),
        error: None,
        partial: false,
        checks: Vec::new(),
        timing: Timing::default(),
    };
    let mut surfaces = Vec::new();
    let mut timing = Timing::default();
    match Setup::prepare(cfg, &mut timing) {
        Err(e) => {
            let (stage, msg) = match &e {
                Error::Stage { stage, source } => (*stage, source.to_string()),
                other => ("setup", other.to_string()),
            };
            report.error = Some(stage_error(stage, msg));
            report.partial = true;
        }
        Ok(setup) => {
            report.model = Some(ModelSummary {
                config: setup.base.config,
                outliers: setup.circuit.clone(),
            });
            report.calibration = setup.stats.as_ref().and_then(|s| s.first()).map(|s| CalibrationSummary {
                source: s.source.clone(),
                token_count: s.token_count,
            });
            let mut ev = setup.evaluator();
            for p in cfg.variants() {
                let mut alpha = None;
                if p.smooths() {
                    let t = Instant::now();
                    match setup.alpha_for(&mut ev, p) {
                        Ok((a, search)) => {
                            alpha = Some(a);
                            if let Some(s) = search {
                                report.alpha_search.insert(p.as_str().into(), s);
                            }
                        }
                        Err(e) => {
                            let mut v = VariantReport::new(p, None);
                            v.status = Status::Failed;
                            v.error = Some(stage_error("alpha_search", &e));
                            for m in &cfg.metrics {
                                v.failed.insert(m.as_str().into(), "alpha_search failed".into());
                            }
                            report.variants.push(v);
                            continue;
                        }
                    }
                    lap(&mut timing, "alpha_search", t);
                }
                let (v, surface) = evaluate_variant(&setup, p, alpha, &mut timing);
                if let Some(s) = surface {
                    surfaces.push((p, s));
                }
                report.variants.push(v);
            }
            report.partial = report.variants.iter().any(|v| v.status != Status::Ok);
        }
    }
    report.checks = run_checks(&report);
    timing.total_seconds = start.elapsed().as_secs_f64();
    report.timing = timing;
    (report, surfaces)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> RunReport {
    run_experiment_with_surfaces(cfg).0
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Self-checks evaluated by `run --check`.
pub fn run_checks(report: &RunReport) -> Vec<Check> {
    let mut out = Vec::new();
    let failed: Vec<String> = report
        .variants
        .iter()
        .filter(|v| v.status != Status::Ok)
        .map(|v| v.pipeline.as_str().to_string())
        .collect();
    out.push(check(
        "complete",
        report.error.is_none() && failed.is_empty(),
        match &report.error {
            Some(e) => format!("{} failed: {}", e.stage, e.message),
            None if failed.is_empty() => "every variant produced every requested metric".into(),
            None => format!("incomplete variants: {}", failed.join(", ")),
        },
    ));
    for v in &report.variants {
        if let Some(e) = v.float_invariance {
            out.push(check(
                &format!("float_invariance.{}", v.pipeline.as_str()),
                e <= INVARIANCE_TOL,
                format!("relative inf-norm deviation {e:.3e} (bound {INVARIANCE_TOL:e})"),
            ));
        }
    }
    let q = report.config.quant_config().ok();
    let quant_off = q.is_some_and(|q| q.act.is_none() && q.kv.is_none() && q.weight.is_none());
    if let (true, Some(b)) = (quant_off, report.variant(Pipeline::Baseline)) {
        if let Some(m) = b.logit_mse {
            out.push(check("identity_baseline", m == 0.0, format!("baseline logit MSE {m:e} with quantization disabled")));
        }
    }
    let outliers = report.model.as_ref().and_then(|m| m.outliers.as_ref());
    if let (Some(c), Some(rot), Some(srot)) = (
        outliers,
        report.variant(Pipeline::Rotate),
        report.variant(Pipeline::SmoothRot),
    ) {
        if !quant_off {
            if let (Some(mr), Some(ms)) = (rot.logit_mse, srot.logit_mse) {
                out.push(check(
                    "smoothrot_beats_rotate",
                    ms < mr,
                    format!(
                        "logit MSE rotate {mr:.6} smoothrot {ms:.6} (gap closure {:.1}%)",
                        100.0 * gap_closure(mr, ms, 0.0)
                    ),
                ));
            }
        }
        let at = |v: &VariantReport| {
            v.down_proj
                .as_ref()
                .and_then(|d| d.iter().find(|l| l.layer == c.layer))
                .map(|l| l.report.max)
        };
        if let (Some(xr), Some(xs)) = (at(rot), at(srot)) {
            let xo = report.variant(Pipeline::Baseline).and_then(at);
            let ok = xs < xr && xo.is_none_or(|o| xr < o);
            out.push(check(
                "outlier_suppression",
                ok,
                format!(
                    "layer {} down-proj input max: original {} rotate {xr} smoothrot {xs}",
                    c.layer,
                    xo.map_or("-".to_string(), |o| o.to_string())
                ),
            ));
        }
    }
    out
}

/// Writes `report.json`, `variants.csv`, alpha-search CSVs and magnitude
/// surfaces into `dir`.
pub fn write_run_outputs(dir: &Path, report: &RunReport, surfaces: &Surfaces) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json())?;
    report.write_variants_csv(dir.join("variants.csv"))?;
    for (p, s) in &report.alpha_search {
        let mut w = csv::Writer::from_path(dir.join(format!("alpha_search_{p}.csv")))?;
        w.write_record(["alpha", "val_logit_mse"])?;
        for (a, m) in &s.table {
            w.write_record([a.to_string(), m.to_string()])?;
        }
        w.flush()?;
    }
    for (p, s) in surfaces {
        let layers: Vec<(usize, &Tensor)> = s.iter().map(|(l, t)| (*l, t)).collect();
        crate::report::write_surface_csv(dir.join(format!("surface_{}.csv", p.as_str())), &layers)?;
    }
    Ok(())
}

/// Config fields that must agree for two reports to be comparable.
const COMPARABLE_FIELDS: &[&str] = &[
    "seed",
    "vocab",
    "hidden",
    "intermediate",
    "layers",
    "heads",
    "outlier_channels",
    "outlier_layer",
    "spike_magnitude",
    "token_fraction",
    "normalize_weight_maxima",
    "bits",
    "weight_bits",
    "act_bits",
    "kv_bits",
    "act_quant",
    "kv_quant",
    "weights",
    "act_clip",
    "kv_clip",
    "kv_group",
    "o_proj_hadamard",
    "rotation_seed",
    "eval_seqs",
    "eval_len",
];

/// Delta and gap-closure table over every successful variant of `reports`.
pub fn compare_variants(reports: &[RunReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| Error::config("no reports to compare"))?;
    let key = |r: &RunReport| serde_json::to_value(&r.config).expect("config serializes");
    let k0 = key(first);
    let mut differing = Vec::new();
    for r in &reports[1..] {
        let k = key(r);
        for f in COMPARABLE_FIELDS {
            if k.get(f).unwrap_or(&Value::Null) != k0.get(f).unwrap_or(&Value::Null) && !differing.contains(&f.to_string()) {
                differing.push(f.to_string());
            }
        }
    }
    if !differing.is_empty() {
        return Err(Error::Mismatch(differing));
    }
    let mut rows: Vec<ComparisonRow> = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let source = r
            .calibration
            .as_ref()
            .map_or_else(|| "-".to_string(), |c| c.source.clone());
        for v in &r.variants {
            let Some(mse) = v.logit_mse else { continue };
            rows.push(ComparisonRow {
                report: i,
                pipeline: v.pipeline,
                alpha: v.alpha,
                calib_source: source.clone(),
                logit_mse: mse,
                logit_rel_error: v.logit_rel_error,
                logit_kl: v.logit_kl,
                down_proj_max: v.down_proj_max(),
                delta_mse: 0.0,
                delta_rel_error: None,
                delta_kl: None,
                gap_closure_pct: 0.0,
            });
        }
    }
    let reference = rows
        .iter()
        .find(|r| r.pipeline == Pipeline::Rotate)
        .or(rows.first())
        .cloned()
        .ok_or_else(|| Error::Contents("no variant in the reports has a logit MSE".into()))?;
    let sub = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    for r in &mut rows {
        r.delta_mse = r.logit_mse - reference.logit_mse;
        r.delta_rel_error = sub(r.logit_rel_error, reference.logit_rel_error);
        r.delta_kl = sub(r.logit_kl, reference.logit_kl);
        r.gap_closure_pct = 100.0 * gap_closure(reference.logit_mse, r.logit_mse, 0.0);
    }
    Ok(ComparisonTable {
        reference: reference.pipeline,
        reference_mse: reference.logit_mse,
        rows,
    })
}

/// Test-split logit MSE of `cfg.pipeline` at every grid alpha, with the
/// rotate-only MSE as a constant reference column.
pub fn sweep_alpha(cfg: &ExperimentConfig, grid: &[f32]) -> Result<SweepTable> {
    if !cfg.pipeline.smooths() {
        return Err(Error::config(format!(
            "sweep-alpha needs a smoothing pipeline, got '{}'",
            cfg.pipeline.as_str()
        )));
    }
    if grid.is_empty() {
        return Err(Error::config("alpha grid is empty"));
    }
    let mut cfg = cfg.clone();
    cfg.compare = Vec::new();
    let setup = Setup::prepare(&cfg, &mut Timing::default())?;
    let mut ev = setup.evaluator();
    let rotate = ev.score(Pipeline::Rotate, 0.0, &setup.test, &setup.ref_test).stage("eval")?.mse;
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let m = ev.score(cfg.pipeline, alpha, &setup.test, &setup.ref_test).stage("eval")?;
        rows.push(SweepRow {
            alpha,
            metric: m.mse,
            rotate_reference: rotate,
        });
    }
    Ok(SweepTable {
        pipeline: cfg.pipeline,
        metric: Metric::LogitMse.as_str().into(),
        rotate_reference: rotate,
        rows,
    })
}

/// Alpha search and test metric of `cfg.pipeline` per calibration source.
pub fn calib_source_ablation(cfg: &ExperimentConfig, sources: &[CalibSource]) -> Result<AblationTable> {
    if !cfg.pipeline.smooths() {
        return Err(Error::config(format!(
            "ablate-calib needs a smoothing pipeline, got '{}'",
            cfg.pipeline.as_str()
        )));
    }
    if sources.len() < 2 {
        return Err(Error::config("calibration ablation needs at least two sources"));
    }
    if sources.contains(&CalibSource::Archive) && cfg.calib_archive.is_none() {
        return Err(Error::config("source 'archive' needs calib_archive"));
    }
    let mut cfg = cfg.clone();
    cfg.compare = Vec::new();
    let mut setup = Setup::prepare(&cfg, &mut Timing::default())?;
    let rotate = setup
        .evaluator()
        .score(Pipeline::Rotate, 0.0, &setup.test, &setup.ref_test)
        .stage("eval")?
        .mse;
    let mut rows = Vec::new();
    for &source in sources {
        let tokens = calibration_tokens(&cfg, &setup.corpus, source).stage("data")?;
        let stats = calibrate(&cfg, &setup.base, source, &tokens).stage("calibrate")?;
        setup.calib = tokens;
        let mut ev = setup.evaluator_with(Some(&stats));
        let (alpha, _) = setup.alpha_for(&mut ev, cfg.pipeline).stage("alpha_search")?;
        let m = ev.score(cfg.pipeline, alpha, &setup.test, &setup.ref_test).stage("eval")?.mse;
        rows.push(AblationRow {
            source: source.as_str().into(),
            token_count: stats.first().map_or(0, |s| s.token_count),
            alpha,
            metric: m,
            rotate_reference: rotate,
            beats_rotate: m < rotate,
        });
    }
    Ok(AblationTable {
        pipeline: cfg.pipeline,
        metric: Metric::LogitMse.as_str().into(),
        rows,
    })
}

/// Outcome of one seed of the paired rotate vs smoothrot comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTrial {
    /// Validation-selected migration strength.
    pub alpha: f32,
    /// Test-split logit MSE, when scored.
    pub rotate_mse: Option<f64>,
    pub smoothrot_mse: Option<f64>,
    /// Max |down-projection input| at the outlier layer on the first test sequences.
    pub max_original: f32,
    pub max_rotate: f32,
    pub max_smoothrot: f32,
}

impl PairedTrial {
    pub fn gap_closure(&self) -> Option<f64> {
        Some(gap_closure(self.rotate_mse?, self.smoothrot_mse?, 0.0))
    }
}

fn tapped_max(model: &TinyModel, seqs: &[Vec<u32>], layer: usize) -> Result<f32> {
    let mut taps = TapRecorder::new();
    for s in seqs {
        model.forward(s, Mode::Float, &mut taps)?;
    }
    Ok(taps.layer(layer).fold(0.0f32, |m, t| m.max(t.pre_quant.abs_max())))
}

/// Paired comparison on one seeded model: alpha is chosen on the validation
/// split, magnitudes come from `magnitude_seqs` test sequences, and test
/// MSEs are computed when `score` is set.
pub fn paired_trial(cfg: &ExperimentConfig, magnitude_seqs: usize, score: bool) -> Result<PairedTrial> {
    let mut cfg = cfg.clone();
    cfg.pipeline = Pipeline::SmoothRot;
    cfg.compare = vec![Pipeline::Rotate];
    let setup = Setup::prepare(&cfg, &mut Timing::default())?;
    let mut ev = setup.evaluator();
    let (alpha, _) = setup.alpha_for(&mut ev, Pipeline::SmoothRot)?;
    let seqs = &setup.test[..magnitude_seqs.clamp(1, setup.test.len())];
    let layer = cfg.outlier_layer;
    let rot = ev.variant(Pipeline::Rotate, 0.0)?.model;
    let srot = ev.variant(Pipeline::SmoothRot, alpha)?.model;
    let max_original = tapped_max(&setup.base, seqs, layer)?;
    let max_rotate = tapped_max(&rot, seqs, layer)?;
    let max_smoothrot = tapped_max(&srot, seqs, layer)?;
    let (mut rotate_mse, mut smoothrot_mse) = (None, None);
    if score {
        rotate_mse = Some(ev.score(Pipeline::Rotate, 0.0, &setup.test, &setup.ref_test)?.mse);
        smoothrot_mse = Some(ev.score(Pipeline::SmoothRot, alpha, &setup.test, &setup.ref_test)?.mse);
    }
    Ok(PairedTrial {
        alpha,
        rotate_mse,
        smoothrot_mse,
        max_original,
        max_rotate,
        max_smoothrot,
    })
}
