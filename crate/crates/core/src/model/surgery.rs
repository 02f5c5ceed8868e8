//! Function-preserving weight surgery: RMSNorm scale fusion and rotation.

use super::{TinyModel, TransformState};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rotation::OrthogonalTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseOutcome {
    Fused,
    /// Norm scales were already folded; nothing changed.
    AlreadyFused,
}

fn scale_rows(w: &mut Tensor, gamma: &[f32]) {
    for (row, g) in w.rows_iter_mut().zip(gamma) {
        for v in row {
            *v *= g;
        }
    }
}

/// Folds every RMSNorm `Γ` into the weights that consume its output
/// (`W ← Γ·W`) and resets `Γ` to ones.
pub fn fuse_rmsnorm(model: &mut TinyModel) -> Result<FuseOutcome> {
    if model.norms_fused {
        return Ok(FuseOutcome::AlreadyFused);
    }
    if !matches!(model.state, TransformState::None | TransformState::Smoothed) {
        return Err(Error::InvalidState(alloc::format!(
            "cannot fuse norms in state {}",
            model.state.as_str()
        )));
    }
    for layer in &mut model.layers {
        let g = core::mem::take(&mut layer.attn_norm.gamma);
        scale_rows(&mut layer.attn.w_q, &g);
        scale_rows(&mut layer.attn.w_k, &g);
        scale_rows(&mut layer.attn.w_v, &g);
        layer.attn_norm.gamma = alloc::vec![1.0; g.len()];

        let g = core::mem::take(&mut layer.ffn_norm.gamma);
        scale_rows(&mut layer.ffn.w_gate, &g);
        scale_rows(&mut layer.ffn.w_up, &g);
        layer.ffn_norm.gamma = alloc::vec![1.0; g.len()];
    }
    let g = core::mem::take(&mut model.final_norm.gamma);
    scale_rows(&mut model.head, &g);
    model.final_norm.gamma = alloc::vec![1.0; g.len()];
    model.norms_fused = true;
    Ok(FuseOutcome::Fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotateOptions {
    /// Fold `H` into the down projection and apply it online to its input.
    pub down_proj_hadamard: bool,
    /// Same for the attention output projection.
    pub o_proj_hadamard: bool,
}

impl Default for RotateOptions {
    fn default() -> Self {
        Self {
            down_proj_hadamard: true,
            o_proj_hadamard: false,
        }
    }
}

/// Rotates the residual stream by `Q`.
///
/// Weights reading the (normalised) hidden state become `Qᵀ·W`, weights
/// writing to it become `W·Q`, embeddings become `E·Q` and the head `Qᵀ·W`.
/// With the down-projection Hadamard enabled the stored down weight is
/// `H·W_down·Q` and `H` runs online on its input, so `(a·H)·(H·W) = a·W`.
pub fn rotate_model(model: &mut TinyModel, q: &OrthogonalTransform, opts: RotateOptions) -> Result<()> {
    if !model.norms_fused
        || !model.final_norm.is_unit()
        || model.layers.iter().any(|l| !l.attn_norm.is_unit() || !l.ffn_norm.is_unit())
    {
        return Err(Error::InvalidState(
            "fuse Γ first: rotation requires unit RMSNorm scales".into(),
        ));
    }
    let next = match model.state {
        TransformState::None => TransformState::Rotated,
        TransformState::Smoothed => TransformState::SmoothRot,
        s => {
            return Err(Error::InvalidState(alloc::format!(
                "model already rotated (state {})",
                s.as_str()
            )))
        }
    };
    let d = model.config.hidden;
    if q.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "rotate_model",
            left: alloc::vec![d],
            right: alloc::vec![q.dim()],
        });
    }
    let h_ffn = OrthogonalTransform::exact_hadamard(model.config.intermediate)?;
    let h_attn = OrthogonalTransform::exact_hadamard(d)?;

    q.apply_in_place(&mut model.embedding)?;
    for layer in &mut model.layers {
        let attn = &mut layer.attn;
        attn.w_q = q.transpose_left_multiply(&attn.w_q)?;
        attn.w_k = q.transpose_left_multiply(&attn.w_k)?;
        attn.w_v = q.transpose_left_multiply(&attn.w_v)?;
        q.apply_in_place(&mut attn.w_o)?;
        if opts.o_proj_hadamard {
            attn.w_o = h_attn.left_multiply(&attn.w_o)?;
            attn.o_proj_hadamard = true;
        }

        let ffn = &mut layer.ffn;
        ffn.w_gate = q.transpose_left_multiply(&ffn.w_gate)?;
        ffn.w_up = q.transpose_left_multiply(&ffn.w_up)?;
        q.apply_in_place(&mut ffn.w_down)?;
        if opts.down_proj_hadamard {
            ffn.w_down = h_ffn.left_multiply(&ffn.w_down)?;
            ffn.online_hadamard = true;
        }
    }
    model.head = q.transpose_left_multiply(&model.head)?;
    model.state = next;
    Ok(())
}
