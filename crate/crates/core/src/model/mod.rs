//! Toy decoder-only transformer with learned absolute positions.
//!
//! Weights are stored `d_in × d_out`, so a projection is `x · W`. Cached
//! keys/values (a KV cache or a prefix) occupy positions `0..cached` and new
//! tokens continue from there, which makes a cached prefix exactly
//! equivalent to literally prepending the tokens it was extracted from.

mod cache;
mod checkpoint;
mod config;
mod forward;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::{fake_quant, resolve_params, smooth_migrate_shared, CalibrationStats, QuantSpec};
use crate::taps::{attn_tap, mlp_tap};
use crate::tensor::Tensor;

pub use cache::{KVCache, PrefixCache, Provenance};
pub use checkpoint::{read_container, write_container, Container, FORMAT_VERSION, MAGIC};
pub use config::{Activation, NormStyle, TransformerConfig, NORM_EPS};
pub use forward::{ForwardOptions, ForwardOutput, GraphForward};
pub use train::{train_from, train_toy, TrainConfig, TrainLog};

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Option<Tensor>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm_gain: Tensor,
    pub mlp_norm_bias: Option<Tensor>,
    pub w_gate: Option<Tensor>,
    pub w_up: Tensor,
    pub w_down: Tensor,
    /// Per-channel divisors applied to the attention input (SmoothQuant).
    pub attn_smooth: Option<Tensor>,
    pub mlp_smooth: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Option<Tensor>,
    pub lm_head: Tensor,
}

/// The model's tensors bound into a [`Graph`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm_gain: Option<Var>,
    pub lm_head: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Option<Var>,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm_gain: Var,
    pub mlp_norm_bias: Option<Var>,
    pub w_gate: Option<Var>,
    pub w_up: Var,
    pub w_down: Var,
    pub attn_inv_smooth: Option<Var>,
    pub mlp_inv_smooth: Option<Var>,
}

impl TransformerModel {
    /// Random initialization: N(0, 0.02) for matrices, with residual output
    /// projections shrunk by `1/sqrt(2·n_layers)`; unit gains, zero biases.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f32| {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng))
        };
        let (d, f) = (config.d_model, config.d_ff);
        let out_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
        let ln = config.norm == NormStyle::PostLn;
        let tok_emb = normal(&[config.vocab_size, d], INIT_STD);
        let pos_emb = normal(&[config.max_seq_len, d], INIT_STD);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = normal(&[d, d], INIT_STD);
            let wk = normal(&[d, d], INIT_STD);
            let wv = normal(&[d, d], INIT_STD);
            let wo = normal(&[d, d], out_std);
            let w_gate = (config.activation == Activation::Swiglu).then(|| normal(&[d, f], INIT_STD));
            let w_up = normal(&[d, f], INIT_STD);
            let w_down = normal(&[f, d], out_std);
            layers.push(LayerWeights {
                attn_norm_gain: Tensor::full(&[d], 1.0),
                attn_norm_bias: ln.then(|| Tensor::zeros(&[d])),
                wq,
                wk,
                wv,
                wo,
                mlp_norm_gain: Tensor::full(&[d], 1.0),
                mlp_norm_bias: ln.then(|| Tensor::zeros(&[d])),
                w_gate,
                w_up,
                w_down,
                attn_smooth: None,
                mlp_smooth: None,
            });
        }
        let lm_head = normal(&[d, config.vocab_size], INIT_STD);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm_gain: (config.norm == NormStyle::PreRms).then(|| Tensor::full(&[d], 1.0)),
            lm_head,
        })
    }

    /// All tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let mut put = |name: &str, t: &Option<Tensor>| {
                if let Some(t) = t {
                    out.push((format!("layers.{i}.{name}"), t.clone()));
                }
            };
            put("attn_norm.gain", &Some(l.attn_norm_gain.clone()));
            put("attn_norm.bias", &l.attn_norm_bias);
            put("attn.wq", &Some(l.wq.clone()));
            put("attn.wk", &Some(l.wk.clone()));
            put("attn.wv", &Some(l.wv.clone()));
            put("attn.wo", &Some(l.wo.clone()));
            put("mlp_norm.gain", &Some(l.mlp_norm_gain.clone()));
            put("mlp_norm.bias", &l.mlp_norm_bias);
            put("mlp.w_gate", &l.w_gate);
            put("mlp.w_up", &Some(l.w_up.clone()));
            put("mlp.w_down", &Some(l.w_down.clone()));
            put("attn_in.smooth", &l.attn_smooth);
            put("mlp_in.smooth", &l.mlp_smooth);
        }
        if let Some(g) = &self.final_norm_gain {
            out.push(("final_norm.gain".to_string(), g.clone()));
        }
        out.push(("lm_head".to_string(), self.lm_head.clone()));
        out
    }

    /// Rebuilds a model from [`Self::named_tensors`] output, checking every
    /// shape against `config`.
    pub fn from_named(config: TransformerConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut take = |name: &str, shape: &[usize], required: bool| -> Result<Option<Tensor>> {
            match map.remove(name) {
                Some(t) if t.shape() == shape => Ok(Some(t)),
                Some(t) => Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                ))),
                None if required => Err(Error::Format(format!("missing tensor `{name}`"))),
                None => Ok(None),
            }
        };
        let ln = config.norm == NormStyle::PostLn;
        let swiglu = config.activation == Activation::Swiglu;
        let tok_emb = take("tok_emb", &[v, d], true)?.unwrap();
        let pos_emb = take("pos_emb", &[config.max_seq_len, d], true)?.unwrap();
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            layers.push(LayerWeights {
                attn_norm_gain: take(&p("attn_norm.gain"), &[d], true)?.unwrap(),
                attn_norm_bias: take(&p("attn_norm.bias"), &[d], ln)?,
                wq: take(&p("attn.wq"), &[d, d], true)?.unwrap(),
                wk: take(&p("attn.wk"), &[d, d], true)?.unwrap(),
                wv: take(&p("attn.wv"), &[d, d], true)?.unwrap(),
                wo: take(&p("attn.wo"), &[d, d], true)?.unwrap(),
                mlp_norm_gain: take(&p("mlp_norm.gain"), &[d], true)?.unwrap(),
                mlp_norm_bias: take(&p("mlp_norm.bias"), &[d], ln)?,
                w_gate: take(&p("mlp.w_gate"), &[d, f], swiglu)?,
                w_up: take(&p("mlp.w_up"), &[d, f], true)?.unwrap(),
                w_down: take(&p("mlp.w_down"), &[f, d], true)?.unwrap(),
                attn_smooth: take(&p("attn_in.smooth"), &[d], false)?,
                mlp_smooth: take(&p("mlp_in.smooth"), &[d], false)?,
            });
        }
        let final_norm_gain = take("final_norm.gain", &[d], !ln)?;
        let lm_head = take("lm_head", &[d, v], true)?.unwrap();
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        let model = Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm_gain,
            lm_head,
        };
        if !model.named_tensors().iter().all(|(_, t)| t.all_finite()) {
            return Err(Error::Numerical("model weights contain non-finite values".into()));
        }
        Ok(model)
    }

    /// Hash over every named tensor; equal checksums mean bit-identical weights.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in self.named_tensors() {
            for b in name.bytes().map(u64::from).chain(std::iter::once(t.checksum())) {
                h ^= b;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Binds every tensor as a graph leaf; `trainable` decides whether they
    /// receive gradients. Smoothing divisors are always frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let lv = LayerVars {
                attn_norm_gain: leaf(&l.attn_norm_gain),
                attn_norm_bias: l.attn_norm_bias.as_ref().map(&mut leaf),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                mlp_norm_gain: leaf(&l.mlp_norm_gain),
                mlp_norm_bias: l.mlp_norm_bias.as_ref().map(&mut leaf),
                w_gate: l.w_gate.as_ref().map(&mut leaf),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
                attn_inv_smooth: None,
                mlp_inv_smooth: None,
            };
            layers.push(lv);
        }
        let final_norm_gain = self.final_norm_gain.as_ref().map(&mut leaf);
        let lm_head = leaf(&self.lm_head);
        for (lv, l) in layers.iter_mut().zip(&self.layers) {
            lv.attn_inv_smooth = l.attn_smooth.as_ref().map(|s| g.constant(s.map(|x| 1.0 / x)));
            lv.mlp_inv_smooth = l.mlp_smooth.as_ref().map(|s| g.constant(s.map(|x| 1.0 / x)));
        }
        ModelVars {
            tok_emb,
            pos_emb,
            layers,
            final_norm_gain,
            lm_head,
        }
    }

    /// Fake-quantizes every block projection weight. Units are groups of
    /// input channels within one output channel.
    pub fn quantize_weights(&self, spec: &QuantSpec) -> Result<Self> {
        let q = |w: &Tensor| -> Result<Tensor> {
            let wt = w.transpose()?;
            let params = resolve_params(&wt, spec, None)?;
            fake_quant(&wt, &params).transpose()
        };
        let mut out = self.clone();
        for l in &mut out.layers {
            l.wq = q(&l.wq)?;
            l.wk = q(&l.wk)?;
            l.wv = q(&l.wv)?;
            l.wo = q(&l.wo)?;
            if let Some(w) = &l.w_gate {
                l.w_gate = Some(q(w)?);
            }
            l.w_up = q(&l.w_up)?;
            l.w_down = q(&l.w_down)?;
        }
        Ok(out)
    }

    /// SmoothQuant migration for both taps of every layer, using the
    /// per-channel activation maxima in `stats`. Existing divisors are
    /// composed with the new ones.
    pub fn smooth(&self, stats: &CalibrationStats, alpha: f32) -> Result<Self> {
        let mut out = self.clone();
        for (i, l) in out.layers.iter_mut().enumerate() {
            let tap_absmax = |name: String| {
                stats
                    .get(&name)
                    .map(|s| s.absmax.clone())
                    .ok_or(Error::CalibrationMissing(name))
            };
            let a = tap_absmax(attn_tap(i))?;
            let (ws, div) = smooth_migrate_shared(&[&l.wq, &l.wk, &l.wv], &a, alpha)?;
            l.wq = ws[0].clone();
            l.wk = ws[1].clone();
            l.wv = ws[2].clone();
            l.attn_smooth = Some(compose(l.attn_smooth.as_ref(), &div));

            let a = tap_absmax(mlp_tap(i))?;
            let mut mats = vec![&l.w_up];
            if let Some(w) = &l.w_gate {
                mats.insert(0, w);
            }
            let (ws, div) = smooth_migrate_shared(&mats, &a, alpha)?;
            let mut it = ws.into_iter();
            if l.w_gate.is_some() {
                l.w_gate = it.next();
            }
            l.w_up = it.next().expect("up projection");
            l.mlp_smooth = Some(compose(l.mlp_smooth.as_ref(), &div));
        }
        Ok(out)
    }
}

fn compose(old: Option<&Tensor>, new: &Tensor) -> Tensor {
    match old {
        Some(o) => Tensor::from_fn(new.shape(), |i| o.data()[i] * new.data()[i]),
        None => new.clone(),
    }
}

/// Iterates over the trainable vars of a bound model in `named_tensors`
/// order (smoothing divisors excluded).
pub(crate) fn trainable_vars(v: &ModelVars) -> Vec<Var> {
    let mut out = vec![v.tok_emb, v.pos_emb];
    for l in &v.layers {
        out.push(l.attn_norm_gain);
        out.extend(l.attn_norm_bias);
        out.extend([l.wq, l.wk, l.wv, l.wo, l.mlp_norm_gain]);
        out.extend(l.mlp_norm_bias);
        out.extend(l.w_gate);
        out.extend([l.w_up, l.w_down]);
    }
    out.extend(v.final_norm_gain);
    out.push(v.lm_head);
    out
}
