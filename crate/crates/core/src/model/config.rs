use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormStyle {
    /// RMSNorm before each sublayer, plus a final norm.
    PreRms,
    /// LayerNorm after each residual addition.
    PostLn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Swiglu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm: NormStyle,
    pub activation: Activation,
}

pub const NORM_EPS: f32 = 1e-5;

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::llama_ish()
    }
}

impl TransformerConfig {
    /// Pre-RMSNorm, SwiGLU; byte vocabulary plus BOS.
    pub fn llama_ish() -> Self {
        Self {
            vocab_size: 257,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 384,
            max_seq_len: 512,
            norm: NormStyle::PreRms,
            activation: Activation::Swiglu,
        }
    }

    /// Post-LayerNorm, GELU.
    pub fn gpt_ish() -> Self {
        Self {
            norm: NormStyle::PostLn,
            activation: Activation::Gelu,
            ..Self::llama_ish()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llama-ish" => Ok(Self::llama_ish()),
            "gpt-ish" => Ok(Self::gpt_ish()),
            other => Err(Error::Config(format!("unknown architecture preset `{other}`"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}
