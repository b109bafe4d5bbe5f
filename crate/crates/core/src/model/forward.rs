use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::ActivationQuantizer;
use crate::taps::{attn_tap, mlp_tap, Capture, TapRecord};
use crate::tensor::Tensor;

use super::cache::KVCache;
use super::config::{Activation, NormStyle, NORM_EPS};
use super::{LayerVars, ModelVars, TransformerModel};

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Cached keys/values (a prefix or earlier tokens) visible to every
    /// query; new tokens take positions after them.
    pub prefix: Option<&'a KVCache>,
    /// Fake quantization applied to each tap before its consuming matmul.
    pub quant: Option<&'a dyn ActivationQuantizer>,
    pub capture: Capture,
    /// Leading rows that are literal prefix tokens: excluded from dynamic
    /// quantization ranges and from the tracked quantization error.
    pub content_start: usize,
    /// Accumulate `Σ‖X − q(X)‖²` over content rows inside the graph.
    pub track_lq: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn with_prefix(mut self, prefix: Option<&'a KVCache>) -> Self {
        self.prefix = prefix;
        self
    }

    pub fn with_quant(mut self, quant: &'a dyn ActivationQuantizer) -> Self {
        self.quant = Some(quant);
        self
    }

    pub fn with_capture(mut self, capture: Capture) -> Self {
        self.capture = capture;
        self
    }
}

/// Graph-level forward result.
pub struct GraphForward {
    /// `n × vocab`.
    pub logits: Var,
    /// Keys and values of the new tokens per layer, each `n × d_model`.
    pub kv: Vec<(Var, Var)>,
    /// Scalar quantization error when tracking was requested with a quantizer.
    pub lq: Option<Var>,
    pub taps: TapRecord,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Keys and values of the new tokens per layer, each `n × d_model`.
    pub kv: Vec<(Tensor, Tensor)>,
    pub lq: Option<f64>,
    pub taps: TapRecord,
}

struct TapCtx<'o, 'a> {
    opts: &'o ForwardOptions<'a>,
    taps: TapRecord,
    lq: Option<Var>,
}

impl TapCtx<'_, '_> {
    fn apply(&mut self, g: &mut Graph, x: Var, inv_smooth: Option<Var>, name: String) -> Result<Var> {
        let x = match inv_smooth {
            Some(s) => g.mul_row(x, s)?,
            None => x,
        };
        if self.opts.capture.activations {
            self.taps.activations.push((name.clone(), g.value(x).clone()));
        }
        let Some(quant) = self.opts.quant else {
            return Ok(x);
        };
        let xq = quant.quantize(g, &name, x, self.opts.content_start)?;
        if self.opts.track_lq {
            let cs = self.opts.content_start;
            let (a, b) = if cs > 0 {
                let rows = g.value(x).dims2().0;
                (g.slice_rows(x, cs, rows)?, g.slice_rows(xq, cs, rows)?)
            } else {
                (x, xq)
            };
            let d = g.sub(a, b)?;
            let e = g.sum_squares(d);
            self.lq = Some(match self.lq {
                Some(acc) => g.add(acc, e)?,
                None => e,
            });
        }
        Ok(xq)
    }
}

impl TransformerModel {
    /// Checks token ids and the context budget for `n` new tokens after
    /// `cached` positions.
    pub fn check_input(&self, tokens: &[u32], cached: usize) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::contract("forward over zero tokens"));
        }
        let needed = cached + tokens.len();
        if needed > self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                needed,
                max: self.config.max_seq_len,
            });
        }
        tokens
            .iter()
            .map(|&t| {
                if (t as usize) < self.config.vocab_size {
                    Ok(t as usize)
                } else {
                    Err(Error::TokenOutOfRange {
                        id: t,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Builds the forward pass inside `g`. `past` holds per-layer cached
    /// keys/values (`cached × d_model`), possibly trainable.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[u32],
        past: &[(Var, Var)],
        opts: &ForwardOptions,
    ) -> Result<GraphForward> {
        let cfg = &self.config;
        if !past.is_empty() && past.len() != cfg.n_layers {
            return Err(Error::contract(format!(
                "cache has {} layers, model has {}",
                past.len(),
                cfg.n_layers
            )));
        }
        let cached = past.first().map(|(k, _)| g.value(*k).dims2().0).unwrap_or(0);
        for &(k, v) in past {
            let (kr, kc) = g.value(k).dims2();
            let (vr, vc) = g.value(v).dims2();
            if kr != cached || vr != cached || kc != cfg.d_model || vc != cfg.d_model {
                return Err(Error::shape("kv_cache", g.value(k).shape(), g.value(v).shape()));
            }
        }
        let ids = self.check_input(tokens, cached)?;
        let n = ids.len();
        if opts.content_start >= n {
            return Err(Error::contract(format!(
                "content starts at row {} of {n}",
                opts.content_start
            )));
        }
        let pos: Vec<usize> = (cached..cached + n).collect();
        let te = g.embed(vars.tok_emb, &ids)?;
        let pe = g.embed(vars.pos_emb, &pos)?;
        let mut x = g.add(te, pe)?;

        let mut ctx = TapCtx {
            opts,
            taps: TapRecord {
                content_start: opts.content_start,
                prefix_len: cached,
                ..TapRecord::default()
            },
            lq: None,
        };
        let mut kv_out = Vec::with_capacity(cfg.n_layers);
        for (i, lv) in vars.layers.iter().enumerate() {
            if opts.capture.residuals {
                ctx.taps.residuals.push(g.value(x).clone());
            }
            let h = match cfg.norm {
                NormStyle::PreRms => g.rmsnorm(x, lv.attn_norm_gain, NORM_EPS)?,
                NormStyle::PostLn => x,
            };
            let h = ctx.apply(g, h, lv.attn_inv_smooth, attn_tap(i))?;
            let (attn, k, v, probs) = self.attention(g, lv, h, past.get(i).copied(), opts.capture.attention)?;
            kv_out.push((k, v));
            if opts.capture.attention {
                ctx.taps.attention.push(probs);
            }
            x = g.add(x, attn)?;
            if cfg.norm == NormStyle::PostLn {
                x = g.layernorm(x, lv.attn_norm_gain, lv.attn_norm_bias.expect("post-ln bias"), NORM_EPS)?;
            }

            let h = match cfg.norm {
                NormStyle::PreRms => g.rmsnorm(x, lv.mlp_norm_gain, NORM_EPS)?,
                NormStyle::PostLn => x,
            };
            let h = ctx.apply(g, h, lv.mlp_inv_smooth, mlp_tap(i))?;
            let inner = match cfg.activation {
                Activation::Swiglu => {
                    let gate = g.matmul(h, lv.w_gate.expect("swiglu gate"))?;
                    let gate = g.silu(gate);
                    let up = g.matmul(h, lv.w_up)?;
                    g.mul(gate, up)?
                }
                Activation::Gelu => {
                    let up = g.matmul(h, lv.w_up)?;
                    g.gelu(up)
                }
            };
            let mlp = g.matmul(inner, lv.w_down)?;
            x = g.add(x, mlp)?;
            if cfg.norm == NormStyle::PostLn {
                x = g.layernorm(x, lv.mlp_norm_gain, lv.mlp_norm_bias.expect("post-ln bias"), NORM_EPS)?;
            }
        }
        if let Some(gain) = vars.final_norm_gain {
            x = g.rmsnorm(x, gain, NORM_EPS)?;
        }
        let logits = g.matmul(x, vars.lm_head)?;
        Ok(GraphForward {
            logits,
            kv: kv_out,
            lq: ctx.lq,
            taps: ctx.taps,
        })
    }

    #[allow(clippy::type_complexity)]
    fn attention(
        &self,
        g: &mut Graph,
        lv: &LayerVars,
        h: Var,
        past: Option<(Var, Var)>,
        capture: bool,
    ) -> Result<(Var, Var, Var, Vec<Tensor>)> {
        let hd = self.config.head_dim();
        let q = g.matmul(h, lv.wq)?;
        let k = g.matmul(h, lv.wk)?;
        let v = g.matmul(h, lv.wv)?;
        let (kf, vf) = match past {
            Some((pk, pv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?),
            None => (k, v),
        };
        let scale = 1.0 / (hd as f32).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut probs = Vec::new();
        for head in 0..self.config.n_heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(kf, head * hd, hd)?;
            let vh = g.slice_cols(vf, head * hd, hd)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.causal_softmax(s)?;
            if capture {
                probs.push(g.value(a).clone());
            }
            heads.push(g.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = g.matmul(o, lv.wo)?;
        Ok((out, k, v, probs))
    }

    /// Forward pass with frozen weights.
    pub fn forward(&self, tokens: &[u32], opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let past = match opts.prefix {
            Some(c) => c.bind(&mut g, false, self)?,
            None => Vec::new(),
        };
        let out = self.forward_graph(&mut g, &vars, tokens, &past, opts)?;
        let logits = g.value(out.logits).clone();
        if !logits.all_finite() {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        Ok(ForwardOutput {
            logits,
            kv: out
                .kv
                .iter()
                .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
                .collect(),
            lq: out.lq.map(|v| g.value(v).item() as f64),
            taps: out.taps,
        })
    }
}

/// Summed next-token negative log-likelihood of `logits` rows `0..n-1`
/// against `tokens[1..]`, in f64.
pub(crate) fn nll_sum(logits: &Tensor, tokens: &[u32]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in tokens[1..].iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t as usize] as f64;
    }
    total
}

impl TransformerModel {
    /// Summed next-token loss over the content of `text` and the number of
    /// predictions made. Prefix positions never enter the loss.
    pub fn nll(&self, text: &[u32], prefix: Option<&KVCache>, quant: Option<&dyn ActivationQuantizer>) -> Result<(f64, usize)> {
        if text.len() < 2 {
            return Err(Error::TextTooShort { len: text.len(), min: 2 });
        }
        let opts = ForwardOptions {
            prefix,
            quant,
            ..ForwardOptions::default()
        };
        let out = self.forward(text, &opts)?;
        Ok((nll_sum(&out.logits, text), text.len() - 1))
    }

    /// `exp` of the mean next-token cross entropy over content positions.
    pub fn perplexity(&self, text: &[u32], prefix: Option<&KVCache>, quant: Option<&dyn ActivationQuantizer>) -> Result<f64> {
        let (sum, n) = self.nll(text, prefix, quant)?;
        Ok((sum / n as f64).exp())
    }

    /// Perplexity pooled over several texts (token-weighted).
    pub fn perplexity_many(
        &self,
        texts: &[Vec<u32>],
        prefix: Option<&KVCache>,
        quant: Option<&dyn ActivationQuantizer>,
    ) -> Result<f64> {
        use rayon::prelude::*;
        if texts.is_empty() {
            return Err(Error::TextTooShort { len: 0, min: 2 });
        }
        let parts: Vec<(f64, usize)> = texts
            .par_iter()
            .map(|t| self.nll(t, prefix, quant))
            .collect::<Result<_>>()?;
        let (sum, n) = parts.iter().fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
        Ok((sum / n as f64).exp())
    }
}
