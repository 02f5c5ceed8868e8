//! Channel-wise smoothing of down-projection inputs.
//!
//! Per channel `s_j = max|X_j|^α / max|W_j|^(1−α)`, where `X_j` ranges over
//! calibration activations entering the down projection and `W_j` is row `j`
//! of the down weight. The up projection absorbs `Λ⁻¹` (its output columns
//! are divided by `s`) and the down projection absorbs `Λ` (its input rows
//! are multiplied by `s`). The gate path stays untouched: the gate output
//! multiplies the up output elementwise, so scaling one factor scales the
//! product.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{AbsMaxObserver, FfnBlock, Mode, TinyModel, TransformState};

/// Channels whose activation or weight maximum falls below this get `s_j = 1`.
pub const SCALE_EPS: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationStats {
    /// `max|X_j|` over every calibration token, one entry per intermediate channel.
    pub act_absmax: Vec<f32>,
    pub token_count: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothingFactors {
    pub s: Vec<f32>,
    pub alpha: f32,
}

impl SmoothingFactors {
    pub fn ones(len: usize) -> Self {
        Self {
            s: alloc::vec![1.0; len],
            alpha: 0.0,
        }
    }
}

/// Runs the untransformed float model over `calib` and records, per layer,
/// the channel maxima of the down-projection input.
pub fn collect_act_stats(model: &TinyModel, calib: &[Vec<u32>], source: &str) -> Result<Vec<CalibrationStats>> {
    if model.state != TransformState::None {
        return Err(Error::InvalidState(alloc::format!(
            "calibration needs an untransformed model, got state {}",
            model.state.as_str()
        )));
    }
    if calib.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty {
            context: "calibration tokens",
        });
    }
    let mut obs = AbsMaxObserver::new(model.layers.len(), model.config.intermediate);
    for seq in calib.iter().filter(|s| !s.is_empty()) {
        model.forward(seq, Mode::Float, &mut obs)?;
    }
    let token_count = obs.tokens;
    Ok(obs
        .absmax
        .into_iter()
        .map(|act_absmax| CalibrationStats {
            act_absmax,
            token_count,
            source: source.into(),
        })
        .collect())
}

/// `max|W_j|` for every input row `j` of the down projection.
pub fn down_weight_absmax(ffn: &FfnBlock) -> Vec<f32> {
    ffn.w_down
        .rows_iter()
        .map(|r| r.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

pub fn compute_scales(stats: &CalibrationStats, w_absmax: &[f32], alpha: f32) -> Result<SmoothingFactors> {
    if stats.act_absmax.len() != w_absmax.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_scales",
            left: alloc::vec![stats.act_absmax.len()],
            right: alloc::vec![w_absmax.len()],
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(alloc::format!("alpha {alpha} outside [0, 1]")));
    }
    let a = alpha as f64;
    let s = stats
        .act_absmax
        .iter()
        .zip(w_absmax)
        .map(|(&x, &w)| {
            if x <= SCALE_EPS || w <= SCALE_EPS {
                1.0
            } else {
                (libm::pow(x as f64, a) / libm::pow(w as f64, 1.0 - a)) as f32
            }
        })
        .collect();
    Ok(SmoothingFactors { s, alpha })
}

/// `W_up ← W_up·Λ⁻¹`, `W_down ← Λ·W_down`.
pub fn fuse_smoothing(ffn: &FfnBlock, factors: &SmoothingFactors) -> Result<FfnBlock> {
    let m = ffn.intermediate();
    if factors.s.len() != m {
        return Err(Error::ShapeMismatch {
            op: "fuse_smoothing",
            left: alloc::vec![m],
            right: alloc::vec![factors.s.len()],
        });
    }
    if factors.s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("smoothing scales must be positive and finite".into()));
    }
    if ffn.online_hadamard {
        return Err(Error::InvalidState("smoothing must precede rotation".into()));
    }
    let mut out = ffn.clone();
    for row in out.w_up.rows_iter_mut() {
        for (v, s) in row.iter_mut().zip(&factors.s) {
            *v /= s;
        }
    }
    for (row, s) in out.w_down.rows_iter_mut().zip(&factors.s) {
        for v in row {
            *v *= s;
        }
    }
    Ok(out)
}

/// Scales for every layer from calibration statistics.
pub fn smoothing_factors(model: &TinyModel, stats: &[CalibrationStats], alpha: f32) -> Result<Vec<SmoothingFactors>> {
    if stats.len() != model.layers.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} calibration entries for {} layers",
            stats.len(),
            model.layers.len()
        )));
    }
    model
        .layers
        .iter()
        .zip(stats)
        .map(|(l, st)| compute_scales(st, &down_weight_absmax(&l.ffn), alpha))
        .collect()
}

/// Fuses per-layer factors into every feed-forward block; `none → smoothed`.
pub fn smooth_model(model: &mut TinyModel, factors: &[SmoothingFactors]) -> Result<()> {
    if model.state != TransformState::None {
        return Err(Error::InvalidState(alloc::format!(
            "smoothing must precede rotation (state {})",
            model.state.as_str()
        )));
    }
    if factors.len() != model.layers.len() {
        return Err(Error::InvalidArgument("one smoothing vector per layer required".into()));
    }
    let fused: Vec<FfnBlock> = model
        .layers
        .iter()
        .zip(factors)
        .map(|(l, f)| fuse_smoothing(&l.ffn, f))
        .collect::<Result<_>>()?;
    for (l, f) in model.layers.iter_mut().zip(fused) {
        l.ffn = f;
    }
    model.state = TransformState::Smoothed;
    Ok(())
}

/// Rescales every down-weight row to unit max (compensating in the up
/// projection) without changing the network function or the transform state.
pub fn normalize_down_weight_maxima(model: &mut TinyModel) -> Result<()> {
    if model.state != TransformState::None {
        return Err(Error::InvalidState("normalise weights before any transform".into()));
    }
    for l in &mut model.layers {
        let r = down_weight_absmax(&l.ffn);
        for (row, &rj) in l.ffn.w_down.rows_iter_mut().zip(&r) {
            if rj > 0.0 {
                for v in row {
                    *v /= rj;
                }
            }
        }
        for row in l.ffn.w_up.rows_iter_mut() {
            for (v, &rj) in row.iter_mut().zip(&r) {
                if rj > 0.0 {
                    *v *= rj;
                }
            }
        }
    }
    Ok(())
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_alpha_grid() -> Vec<f32> {
    (1..=19).map(|i| i as f32 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaSearch {
    pub best_alpha: f32,
    pub best_metric: f64,
    /// `(alpha, metric)` in grid order.
    pub table: Vec<(f32, f64)>,
}

/// Linear search minimising `eval(alpha)`; ties go to the smaller alpha.
pub fn alpha_search(grid: &[f32], mut eval: impl FnMut(f32) -> Result<f64>) -> Result<AlphaSearch> {
    if grid.is_empty() {
        return Err(Error::Empty { context: "alpha grid" });
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(alloc::format!("alpha {a} outside [0, 1]")));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let m = eval(alpha).map_err(|e| Error::AlphaSearch {
            alpha,
            source: alloc::boxed::Box::new(e),
        })?;
        if m.is_nan() {
            return Err(Error::AlphaSearch {
                alpha,
                source: alloc::boxed::Box::new(Error::NonFinite { context: "alpha metric" }),
            });
        }
        table.push((alpha, m));
    }
    let (best_alpha, best_metric) = table
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .expect("nonempty");
    Ok(AlphaSearch {
        best_alpha,
        best_metric,
        table,
    })
}
