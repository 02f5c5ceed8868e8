//! Run reports, comparison tables and their JSON/CSV encodings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use smoothrot_core::experiment::Pipeline;
use smoothrot_core::model::ModelConfig;
use smoothrot_core::outliers::MagnitudeReport;
use smoothrot_core::smoothing::AlphaSearch;
use smoothrot_core::weight_quant::LayerWeightReport;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::persist::CircuitManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
    pub core_version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: smoothrot_core::VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub outliers: Option<CircuitManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub source: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMagnitude {
    pub layer: usize,
    #[serde(flatten)]
    pub report: MagnitudeReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Some metrics failed; see `failed`.
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub pipeline: Pipeline,
    /// Migration strength used, for smoothing pipelines.
    pub alpha: Option<f32>,
    pub status: Status,
    pub error: Option<StageError>,
    /// `max |float logits − original float logits| / max |original|` on the evaluation split.
    pub float_invariance: Option<f64>,
    pub logit_mse: Option<f64>,
    pub logit_rel_error: Option<f64>,
    pub logit_kl: Option<f64>,
    /// Quantizer-facing down-projection input of each layer, float pass.
    pub down_proj: Option<Vec<LayerMagnitude>>,
    /// Per projection input, keyed `layers.{i}.{proj}`.
    pub act_quant_mse: Option<BTreeMap<String, f64>>,
    pub weight_quant: Option<Vec<LayerWeightReport>>,
    pub proxy_loss: Option<BTreeMap<String, f64>>,
    /// Requested metric → reason it is missing.
    pub failed: BTreeMap<String, String>,
    pub skipped: BTreeMap<String, String>,
}

impl VariantReport {
    pub fn new(pipeline: Pipeline, alpha: Option<f32>) -> Self {
        Self {
            pipeline,
            alpha,
            status: Status::Ok,
            error: None,
            float_invariance: None,
            logit_mse: None,
            logit_rel_error: None,
            logit_kl: None,
            down_proj: None,
            act_quant_mse: None,
            weight_quant: None,
            proxy_loss: None,
            failed: BTreeMap::new(),
            skipped: BTreeMap::new(),
        }
    }

    /// Largest down-projection input magnitude over all layers.
    pub fn down_proj_max(&self) -> Option<f32> {
        self.down_proj
            .as_ref()
            .map(|d| d.iter().fold(0.0f32, |m, l| m.max(l.report.max)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub stages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: ToolInfo,
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    pub model: Option<ModelSummary>,
    pub calibration: Option<CalibrationSummary>,
    /// Validation-split search per smoothing pipeline.
    pub alpha_search: BTreeMap<String, AlphaSearch>,
    pub variants: Vec<VariantReport>,
    /// Set when a stage before variant evaluation failed.
    pub error: Option<StageError>,
    /// True when any stage or metric failed.
    pub partial: bool,
    pub checks: Vec<Check>,
    pub timing: Timing,
}

impl RunReport {
    pub fn variant(&self, p: Pipeline) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.pipeline == p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without the `timing` field, the part that is reproducible.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Value::Object(m) = &mut v {
            m.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("json value")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One row per variant: the end-to-end metrics a plot needs.
    pub fn write_variants_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "pipeline",
            "alpha",
            "status",
            "logit_mse",
            "logit_rel_error",
            "logit_kl",
            "down_proj_max",
            "float_invariance",
        ])?;
        for v in &self.variants {
            w.write_record([
                v.pipeline.as_str().to_string(),
                opt(v.alpha),
                format!("{:?}", v.status).to_lowercase(),
                opt(v.logit_mse),
                opt(v.logit_rel_error),
                opt(v.logit_kl),
                opt(v.down_proj_max()),
                opt(v.float_invariance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub report: usize,
    pub pipeline: Pipeline,
    pub alpha: Option<f32>,
    pub calib_source: String,
    pub logit_mse: f64,
    pub logit_rel_error: Option<f64>,
    pub logit_kl: Option<f64>,
    pub down_proj_max: Option<f32>,
    /// `logit_mse − reference logit_mse`.
    pub delta_mse: f64,
    pub delta_rel_error: Option<f64>,
    pub delta_kl: Option<f64>,
    /// Gap closure of logit MSE against the reference, in percent.
    pub gap_closure_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// Variant every delta is taken against: the first rotate-only variant
    /// when present, otherwise the first row.
    pub reference: Pipeline,
    pub reference_mse: f64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "report",
            "pipeline",
            "alpha",
            "calib_source",
            "logit_mse",
            "logit_rel_error",
            "logit_kl",
            "down_proj_max",
            "delta_mse",
            "delta_rel_error",
            "delta_kl",
            "gap_closure_pct",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.report.to_string(),
                r.pipeline.as_str().into(),
                opt(r.alpha),
                r.calib_source.clone(),
                r.logit_mse.to_string(),
                opt(r.logit_rel_error),
                opt(r.logit_kl),
                opt(r.down_proj_max),
                r.delta_mse.to_string(),
                opt(r.delta_rel_error),
                opt(r.delta_kl),
                r.gap_closure_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<4} {:<10} {:>6} {:<14} {:>12} {:>12} {:>9}\n",
            "rep", "pipeline", "alpha", "calib", "logit_mse", "delta_mse", "gap_%"
        );
        for r in &self.rows {
            s += &format!(
                "{:<4} {:<10} {:>6} {:<14} {:>12.6} {:>12.6} {:>9.2}\n",
                r.report,
                r.pipeline.as_str(),
                r.alpha.map(|a| format!("{a:.2}")).unwrap_or_else(|| "-".into()),
                r.calib_source,
                r.logit_mse,
                r.delta_mse,
                r.gap_closure_pct
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f32,
    pub metric: f64,
    pub rotate_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub pipeline: Pipeline,
    pub metric: String,
    pub rotate_reference: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Grid values whose metric beats the rotate-only reference.
    pub fn winning_alphas(&self) -> Vec<f32> {
        self.rows
            .iter()
            .filter(|r| r.metric < r.rotate_reference)
            .map(|r| r.alpha)
            .collect()
    }

    /// True when the winning rows are non-empty and adjacent in grid order.
    pub fn winning_range_contiguous(&self) -> bool {
        let idx: Vec<usize> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.metric < r.rotate_reference)
            .map(|(i, _)| i)
            .collect();
        !idx.is_empty() && idx.windows(2).all(|w| w[1] == w[0] + 1)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["alpha", &self.metric, "rotate_reference"])?;
        for r in &self.rows {
            w.write_record([r.alpha.to_string(), r.metric.to_string(), r.rotate_reference.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub source: String,
    pub token_count: usize,
    pub alpha: f32,
    pub metric: f64,
    pub rotate_reference: f64,
    pub beats_rotate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub pipeline: Pipeline,
    pub metric: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn all_beat_rotate(&self) -> bool {
        self.rows.iter().all(|r| r.beats_rotate)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["source", "token_count", "alpha", &self.metric, "rotate_reference", "beats_rotate"])?;
        for r in &self.rows {
            w.write_record([
                r.source.clone(),
                r.token_count.to_string(),
                r.alpha.to_string(),
                r.metric.to_string(),
                r.rotate_reference.to_string(),
                r.beats_rotate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(layer, token, channel, |value|)` rows for magnitude surface plots.
pub fn write_surface_csv(path: impl AsRef<Path>, layers: &[(usize, &smoothrot_core::Tensor)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "token", "channel", "abs_value"])?;
    for (layer, x) in layers {
        let layer = layer.to_string();
        for (t, row) in x.rows_iter().enumerate() {
            let t = t.to_string();
            for (c, v) in row.iter().enumerate() {
                w.write_record([layer.as_str(), t.as_str(), c.to_string().as_str(), v.abs().to_string().as_str()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
