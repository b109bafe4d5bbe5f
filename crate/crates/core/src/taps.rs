//! Activations and attention maps captured during a forward pass.

use crate::tensor::Tensor;

/// What a forward pass should record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capture {
    /// Quantization taps (post-norm inputs of attention and MLP projections).
    pub activations: bool,
    /// Residual stream entering each block.
    pub residuals: bool,
    /// Per-head attention probabilities.
    pub attention: bool,
}

impl Capture {
    pub const NONE: Capture = Capture {
        activations: false,
        residuals: false,
        attention: false,
    };
    pub const TAPS: Capture = Capture {
        activations: true,
        residuals: false,
        attention: false,
    };
    pub const ALL: Capture = Capture {
        activations: true,
        residuals: true,
        attention: true,
    };
}

#[derive(Clone, Debug, Default)]
pub struct TapRecord {
    /// `(tap name, rows × d_model)` in forward order, e.g. `layers.0.attn_in`.
    pub activations: Vec<(String, Tensor)>,
    /// Block inputs, one `rows × d_model` tensor per layer.
    pub residuals: Vec<Tensor>,
    /// `attention[layer][head]` is `rows × (cached + rows)`; row `i` is the
    /// distribution of query `i` over cached prefix columns followed by the
    /// causal past of the current tokens.
    pub attention: Vec<Vec<Tensor>>,
    /// Rows before this index hold literal prefix tokens rather than content.
    pub content_start: usize,
    /// Number of cached key/value columns each attention row could see.
    pub prefix_len: usize,
}

impl TapRecord {
    pub fn tap(&self, name: &str) -> Option<&Tensor> {
        self.activations.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn rows(&self) -> usize {
        self.activations
            .first()
            .map(|(_, t)| t.dims2().0)
            .or_else(|| self.residuals.first().map(|t| t.dims2().0))
            .unwrap_or(0)
    }
}

pub fn attn_tap(layer: usize) -> String {
    format!("layers.{layer}.attn_in")
}

pub fn mlp_tap(layer: usize) -> String {
    format!("layers.{layer}.mlp_in")
}
