use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::TransformerConfig;
use super::forward::ForwardOptions;
use super::TransformerModel;

/// Per-layer keys and values, each `len × n_heads × head_dim`. Append-only.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    len: usize,
    layers: Vec<(Tensor, Tensor)>,
}

impl KVCache {
    pub fn empty(config: &TransformerConfig) -> Self {
        Self {
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            head_dim: config.head_dim(),
            len: 0,
            layers: Vec::new(),
        }
    }

    /// Builds a cache from per-layer `(keys, values)`, each either
    /// `len × d_model` or `len × n_heads × head_dim`.
    pub fn from_layers(config: &TransformerConfig, layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut c = Self::empty(config);
        if layers.is_empty() {
            return Ok(c);
        }
        if layers.len() != config.n_layers {
            return Err(Error::contract(format!(
                "cache has {} layers, model has {}",
                layers.len(),
                config.n_layers
            )));
        }
        let len = layers[0].0.numel() / config.d_model;
        let shape = [len.max(1), config.n_heads, config.head_dim()];
        let mut out = Vec::with_capacity(layers.len());
        for (k, v) in layers {
            if k.numel() != len * config.d_model || v.numel() != len * config.d_model {
                return Err(Error::shape("kv_cache", k.shape(), v.shape()));
            }
            if !k.all_finite() || !v.all_finite() {
                return Err(Error::Numerical("cache holds non-finite keys or values".into()));
            }
            out.push((k.reshape(&shape)?, v.reshape(&shape)?));
        }
        c.len = len;
        c.layers = out;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn check_model(&self, model: &TransformerModel) -> Result<()> {
        let c = &model.config;
        if c.n_layers != self.n_layers || c.n_heads != self.n_heads || c.head_dim() != self.head_dim {
            return Err(Error::contract(format!(
                "cache geometry {}x{}x{} does not match model {}x{}x{}",
                self.n_layers,
                self.n_heads,
                self.head_dim,
                c.n_layers,
                c.n_heads,
                c.head_dim()
            )));
        }
        Ok(())
    }

    /// Binds the cache as `len × d_model` leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool, model: &TransformerModel) -> Result<Vec<(Var, Var)>> {
        self.check_model(model)?;
        let d = self.n_heads * self.head_dim;
        self.layers
            .iter()
            .map(|(k, v)| {
                Ok((
                    g.leaf(k.reshape(&[self.len, d])?, trainable),
                    g.leaf(v.reshape(&[self.len, d])?, trainable),
                ))
            })
            .collect()
    }

    /// Appends per-layer rows (`n × d_model` each).
    pub fn append(&mut self, new: &[(Tensor, Tensor)]) -> Result<()> {
        if new.len() != self.n_layers {
            return Err(Error::contract("appended keys/values do not cover every layer"));
        }
        let d = self.n_heads * self.head_dim;
        let n = new[0].0.numel() / d;
        let shape = [self.len + n, self.n_heads, self.head_dim];
        let mut layers = Vec::with_capacity(self.n_layers);
        for (i, (k, v)) in new.iter().enumerate() {
            if k.numel() != n * d || v.numel() != n * d {
                return Err(Error::shape("kv_append", k.shape(), v.shape()));
            }
            let (k2, v2) = (k.reshape(&[n, d])?, v.reshape(&[n, d])?);
            let (k, v) = match self.layers.get(i) {
                Some((pk, pv)) => (
                    Tensor::concat_rows(&[&pk.reshape(&[self.len, d])?, &k2])?,
                    Tensor::concat_rows(&[&pv.reshape(&[self.len, d])?, &v2])?,
                ),
                None => (k2, v2),
            };
            layers.push((k.reshape(&shape)?, v.reshape(&shape)?));
        }
        self.layers = layers;
        self.len += n;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GreedyInit,
    Tuned,
    RandomInit,
}

/// Trainable per-layer key/value block of length `m`, prepended to every
/// attention computation.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache {
    pub cache: KVCache,
    pub provenance: Provenance,
    /// Tokens the cache was extracted from; empty for random init.
    pub prompt: Vec<u32>,
}

impl PrefixCache {
    pub fn m(&self) -> usize {
        self.cache.len()
    }

    pub fn all_finite(&self) -> bool {
        self.cache
            .layers()
            .iter()
            .all(|(k, v)| k.all_finite() && v.all_finite())
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

impl TransformerModel {
    /// Feeds `new_tokens` after the cached positions, appends their keys and
    /// values, and returns their logits (`None` for an empty input).
    pub fn decode_step(&self, cache: &mut KVCache, new_tokens: &[u32]) -> Result<Option<Tensor>> {
        if new_tokens.is_empty() {
            return Ok(None);
        }
        cache.check_model(self)?;
        let out = self.forward(new_tokens, &ForwardOptions::default().with_prefix(Some(cache)))?;
        cache.append(&out.kv)?;
        Ok(Some(out.logits))
    }

    /// Keys and values of a clean full-precision pass over `prompt`.
    pub fn extract_prefix_cache(&self, prompt: &[u32]) -> Result<PrefixCache> {
        if prompt.is_empty() {
            return Err(Error::contract("cannot extract a prefix from an empty prompt"));
        }
        let mut cache = KVCache::empty(&self.config);
        self.decode_step(&mut cache, prompt)?;
        Ok(PrefixCache {
            cache,
            provenance: Provenance::GreedyInit,
            prompt: prompt.to_vec(),
        })
    }
}
