//! Flat `key = value` experiment configuration (TOML syntax, no tables).
//!
//! Only `seed` is required; every other key has a default matching the
//! standard desk-scale experiment. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smoothrot_core::experiment::Pipeline;
use smoothrot_core::model::{ModelConfig, QuantConfig};
use smoothrot_core::outliers::OutlierProfile;
use smoothrot_core::quant::QuantSpec;
use smoothrot_core::smoothing::default_alpha_grid;
use smoothrot_core::weight_quant::WeightQuantConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibSource {
    /// Held-out draws from the same synthetic corpus as the evaluation data.
    Synthetic,
    /// Uniform token ids.
    RandomTokens,
    /// Activation statistics loaded from `calib_archive`.
    Archive,
}

impl CalibSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::RandomTokens => "random-tokens",
            Self::Archive => "archive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightBackend {
    Rtn,
    Gptq,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LogitMse,
    LogitRelError,
    LogitKl,
    DownProj,
    ActQuantMse,
    WeightQuantMse,
    ProxyLoss,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::LogitMse,
        Metric::LogitRelError,
        Metric::LogitKl,
        Metric::DownProj,
        Metric::ActQuantMse,
        Metric::WeightQuantMse,
        Metric::ProxyLoss,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::LogitMse => "logit_mse",
            Metric::LogitRelError => "logit_rel_error",
            Metric::LogitKl => "logit_kl",
            Metric::DownProj => "down_proj",
            Metric::ActQuantMse => "act_quant_mse",
            Metric::WeightQuantMse => "weight_quant_mse",
            Metric::ProxyLoss => "proxy_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    #[serde(default = "d::vocab")]
    pub vocab: usize,
    #[serde(default = "d::hidden")]
    pub hidden: usize,
    #[serde(default = "d::intermediate")]
    pub intermediate: usize,
    #[serde(default = "d::layers")]
    pub layers: usize,
    #[serde(default = "d::heads")]
    pub heads: usize,

    /// Number of massive-outlier channels; 0 disables the circuit.
    #[serde(default = "d::outlier_channels")]
    pub outlier_channels: usize,
    #[serde(default)]
    pub outlier_layer: usize,
    #[serde(default = "d::spike_magnitude")]
    pub spike_magnitude: f32,
    #[serde(default = "d::token_fraction")]
    pub token_fraction: f32,

    #[serde(default = "d::pipeline")]
    pub pipeline: Pipeline,
    /// Extra variants evaluated alongside `pipeline` in the same run.
    #[serde(default = "d::compare")]
    pub compare: Vec<Pipeline>,
    /// Fixed migration strength. Without it, smoothing pipelines search `alpha_grid`.
    #[serde(default)]
    pub alpha: Option<f32>,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f32>>,
    /// Rescale down-projection rows to unit max before any transform.
    #[serde(default)]
    pub normalize_weight_maxima: bool,

    #[serde(default = "d::bits")]
    pub bits: u8,
    #[serde(default)]
    pub weight_bits: Option<u8>,
    #[serde(default)]
    pub act_bits: Option<u8>,
    #[serde(default)]
    pub kv_bits: Option<u8>,
    #[serde(default = "d::yes")]
    pub act_quant: bool,
    #[serde(default = "d::yes")]
    pub kv_quant: bool,
    #[serde(default = "d::weights")]
    pub weights: WeightBackend,
    #[serde(default = "d::act_clip")]
    pub act_clip: f32,
    #[serde(default = "d::kv_clip")]
    pub kv_clip: f32,
    #[serde(default = "d::kv_group")]
    pub kv_group: usize,
    #[serde(default)]
    pub o_proj_hadamard: bool,
    /// Defaults to a value derived from `seed`.
    #[serde(default)]
    pub rotation_seed: Option<u64>,

    #[serde(default = "d::calib_source")]
    pub calib_source: CalibSource,
    #[serde(default)]
    pub calib_archive: Option<PathBuf>,
    #[serde(default = "d::calib_seqs")]
    pub calib_seqs: usize,
    #[serde(default = "d::calib_len")]
    pub calib_len: usize,
    /// Calibration sequences used for GPTQ Hessians.
    #[serde(default = "d::gptq_seqs")]
    pub gptq_seqs: usize,
    /// Split used to choose alpha.
    #[serde(default = "d::val_seqs")]
    pub val_seqs: usize,
    #[serde(default = "d::seq_len")]
    pub val_len: usize,
    /// Split used for reported metrics.
    #[serde(default = "d::eval_seqs")]
    pub eval_seqs: usize,
    #[serde(default = "d::seq_len")]
    pub eval_len: usize,

    #[serde(default = "d::metrics")]
    pub metrics: Vec<Metric>,
    /// Entries kept in each magnitude report's top list.
    #[serde(default = "d::top_k")]
    pub top_k: usize,
    #[serde(default = "d::output_dir")]
    pub output_dir: PathBuf,
}

mod d {
    use super::*;
    pub fn vocab() -> usize {
        256
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn intermediate() -> usize {
        256
    }
    pub fn layers() -> usize {
        2
    }
    pub fn heads() -> usize {
        4
    }
    pub fn outlier_channels() -> usize {
        4
    }
    pub fn spike_magnitude() -> f32 {
        1400.0
    }
    pub fn token_fraction() -> f32 {
        0.02
    }
    pub fn pipeline() -> Pipeline {
        Pipeline::SmoothRot
    }
    pub fn compare() -> Vec<Pipeline> {
        vec![Pipeline::Baseline, Pipeline::Rotate]
    }
    pub fn bits() -> u8 {
        4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn weights() -> WeightBackend {
        WeightBackend::Rtn
    }
    pub fn act_clip() -> f32 {
        0.9
    }
    pub fn kv_clip() -> f32 {
        0.95
    }
    pub fn kv_group() -> usize {
        128
    }
    pub fn calib_source() -> CalibSource {
        CalibSource::Synthetic
    }
    pub fn calib_seqs() -> usize {
        512
    }
    pub fn calib_len() -> usize {
        512
    }
    pub fn gptq_seqs() -> usize {
        32
    }
    pub fn val_seqs() -> usize {
        2
    }
    pub fn eval_seqs() -> usize {
        8
    }
    pub fn seq_len() -> usize {
        128
    }
    pub fn metrics() -> Vec<Metric> {
        Metric::ALL.to_vec()
    }
    pub fn top_k() -> usize {
        16
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl ExperimentConfig {
    /// Default experiment for `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self::parse(&format!("seed = {seed}")).expect("defaults are valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides (values in TOML syntax; bare words are
    /// taken as strings) on top of `text`.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{o}' is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.into()));
            table.insert(k.into(), value);
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::config(format!("'{k}': nested tables are not allowed, use flat keys")));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            hidden: self.hidden,
            intermediate: self.intermediate,
            layers: self.layers,
            heads: self.heads,
            ..ModelConfig::default()
        }
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        let bad = |e: smoothrot_core::Error| Error::config(e.to_string());
        let act = if self.act_quant {
            Some(QuantSpec::per_token(self.act_bits.unwrap_or(self.bits), self.act_clip).map_err(bad)?)
        } else {
            None
        };
        let kv = if self.kv_quant {
            Some(
                QuantSpec::grouped_asymmetric(self.kv_bits.unwrap_or(self.bits), self.kv_group.min(self.hidden), self.kv_clip)
                    .map_err(bad)?,
            )
        } else {
            None
        };
        let wb = self.weight_bits.unwrap_or(self.bits);
        let weight = match self.weights {
            WeightBackend::Rtn => Some(WeightQuantConfig::rtn(wb)),
            WeightBackend::Gptq => Some(WeightQuantConfig::gptq(wb)),
            WeightBackend::None => None,
        };
        if let Some(w) = &weight {
            w.spec.validate().map_err(bad)?;
        }
        Ok(QuantConfig { act, kv, weight })
    }

    /// Channels are drawn by the model generator; this only carries magnitudes.
    pub fn outlier_profile(&self, channels: Vec<usize>) -> OutlierProfile {
        OutlierProfile {
            token_fraction: self.token_fraction,
            spike_magnitude: self.spike_magnitude,
            ..OutlierProfile::new(channels)
        }
    }

    pub fn rotation_seed(&self) -> u64 {
        self.rotation_seed.unwrap_or(self.seed ^ 0x5eed_0f_4ada_3a2d)
    }

    /// Variants evaluated by a run: `pipeline` first, then `compare` without duplicates.
    pub fn variants(&self) -> Vec<Pipeline> {
        let mut v = vec![self.pipeline];
        for p in &self.compare {
            if !v.contains(p) {
                v.push(*p);
            }
        }
        v
    }

    pub fn smoothing_requested(&self) -> bool {
        self.variants().iter().any(|p| p.smooths())
    }

    pub fn grid(&self) -> Vec<f32> {
        self.alpha_grid.clone().unwrap_or_else(default_alpha_grid)
    }

    /// Notes on settings that are accepted but have no effect.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.smoothing_requested() && (self.alpha.is_some() || self.alpha_grid.is_some()) {
            w.push("alpha ignored: no variant applies smoothing".into());
        }
        if self.alpha.is_some() && self.alpha_grid.is_some() {
            w.push("alpha_grid ignored: a fixed alpha is set".into());
        }
        if self.calib_source != CalibSource::Archive && self.calib_archive.is_some() {
            w.push("calib_archive ignored: calib_source is not 'archive'".into());
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        self.model_config()
            .validate()
            .map_err(|e| Error::config(format!("model: {e}")))?;
        if self.outlier_channels > self.intermediate {
            return err(format!(
                "outlier_channels {} exceeds intermediate size {}",
                self.outlier_channels, self.intermediate
            ));
        }
        if self.outlier_layer >= self.layers {
            return err(format!("outlier_layer {} out of range for {} layers", self.outlier_layer, self.layers));
        }
        if !(self.spike_magnitude.is_finite() && self.spike_magnitude > 0.0) {
            return err("spike_magnitude must be positive".into());
        }
        if !(self.token_fraction > 0.0 && self.token_fraction < 1.0) {
            return err("token_fraction must lie in (0, 1)".into());
        }
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return err(format!("alpha {a} outside [0, 1]"));
            }
        }
        if let Some(g) = &self.alpha_grid {
            if g.is_empty() {
                return err("alpha_grid is empty".into());
            }
            if let Some(a) = g.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return err(format!("alpha_grid value {a} outside [0, 1]"));
            }
        }
        if self.kv_group == 0 || self.hidden % self.kv_group.min(self.hidden) != 0 {
            return err(format!("kv_group {} must divide hidden size {}", self.kv_group, self.hidden));
        }
        self.quant_config()?;
        for (name, v) in [
            ("calib_seqs", self.calib_seqs),
            ("calib_len", self.calib_len),
            ("gptq_seqs", self.gptq_seqs),
            ("val_seqs", self.val_seqs),
            ("val_len", self.val_len),
            ("eval_seqs", self.eval_seqs),
            ("eval_len", self.eval_len),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.calib_source == CalibSource::Archive && self.calib_archive.is_none() {
            return err("calib_source = \"archive\" needs calib_archive".into());
        }
        if self.metrics.is_empty() {
            return err("metrics is empty".into());
        }
        Ok(())
    }
}
