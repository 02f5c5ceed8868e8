use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn name(&self) -> &'static str {
        match self {
            Proj::Q => "attn.q",
            Proj::K => "attn.k",
            Proj::V => "attn.v",
            Proj::O => "attn.o",
            Proj::Gate => "ffn.gate",
            Proj::Up => "ffn.up",
            Proj::Down => "ffn.down",
        }
    }
}

/// One linear projection of one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub layer: usize,
    pub proj: Proj,
}

impl Site {
    pub fn new(layer: usize, proj: Proj) -> Self {
        Self { layer, proj }
    }
}

/// Hooks into the forward pass. All inputs are reported before quantization.
pub trait Observer {
    /// The float input a projection's weight consumes.
    fn projection_input(&mut self, _site: Site, _x: &Tensor) {}

    /// Down-projection input before and after the online Hadamard. Both
    /// arguments are the same tensor when the block has no Hadamard.
    fn down_proj_input(&mut self, _layer: usize, _pre_hadamard: &Tensor, _pre_quant: &Tensor) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct DownProjTap {
    pub layer: usize,
    pub pre_hadamard: Tensor,
    pub pre_quant: Tensor,
}

/// Stores every down-projection input it sees.
#[derive(Debug, Default)]
pub struct TapRecorder {
    pub taps: Vec<DownProjTap>,
}

impl TapRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Taps of one layer, in forward order.
    pub fn layer(&self, layer: usize) -> impl Iterator<Item = &DownProjTap> {
        self.taps.iter().filter(move |t| t.layer == layer)
    }
}

impl Observer for TapRecorder {
    fn down_proj_input(&mut self, layer: usize, pre_hadamard: &Tensor, pre_quant: &Tensor) {
        self.taps.push(DownProjTap {
            layer,
            pre_hadamard: pre_hadamard.clone(),
            pre_quant: pre_quant.clone(),
        });
    }
}

/// Running per-channel `max|x|` of each layer's down-projection input
/// (pre-Hadamard), plus the token count.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsMaxObserver {
    pub absmax: Vec<Vec<f32>>,
    pub tokens: usize,
}

impl AbsMaxObserver {
    pub fn new(layers: usize, channels: usize) -> Self {
        Self {
            absmax: vec![vec![0.0; channels]; layers],
            tokens: 0,
        }
    }
}

impl Observer for AbsMaxObserver {
    fn down_proj_input(&mut self, layer: usize, pre_hadamard: &Tensor, _pre_quant: &Tensor) {
        let Some(acc) = self.absmax.get_mut(layer) else {
            return;
        };
        for row in pre_hadamard.rows_iter() {
            for (m, v) in acc.iter_mut().zip(row) {
                *m = m.max(v.abs());
            }
        }
        if layer == 0 {
            self.tokens += pre_hadamard.rows();
        }
    }
}
