//! Gradient tuning of a prefix cache's keys and values against
//! `L_pred + λ·L_q` on the fake-quantized model, with weights frozen.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, KVCache, PrefixCache, Provenance, TransformerModel};
use crate::optim::{clip_grads, lr_at, Adam};
use crate::quant::{ActivationQuantizer, CalibrationStats, FakeQuantizer, QuantSpec};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Training sequences per epoch.
    pub num_sequences: usize,
    pub grad_clip: f32,
    pub seed: u64,
    pub quant: QuantSpec,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            epochs: 2,
            lr: 1e-3,
            batch_size: 4,
            seq_len: 128,
            num_sequences: 32,
            grad_clip: 1.0,
            seed: 0,
            quant: QuantSpec::per_tensor_static(8),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.seq_len < 2 || self.num_sequences == 0 {
            return Err(Error::Config(
                "tuning needs batch_size >= 1, seq_len >= 2 and num_sequences >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("tuning lr must be positive, got {}", self.lr)));
        }
        self.quant.validate()
    }
}

/// Loss value, its parts, and the gradient for each prefix layer
/// (`m × d_model` keys and values).
#[derive(Clone, Debug)]
pub struct TuneLoss {
    pub loss: f64,
    pub pred: f64,
    pub lq: f64,
    pub grads: Vec<(Tensor, Tensor)>,
}

fn sequence_loss(
    model: &TransformerModel,
    prefix: &KVCache,
    seq: &[u32],
    quant: Option<&dyn ActivationQuantizer>,
    lambda: f64,
) -> Result<TuneLoss> {
    if seq.len() < 2 {
        return Err(Error::TextTooShort { len: seq.len(), min: 2 });
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let past = prefix.bind(&mut g, true, model)?;
    let mut opts = ForwardOptions::default();
    opts.quant = quant;
    opts.track_lq = quant.is_some();
    let out = model.forward_graph(&mut g, &vars, &seq[..seq.len() - 1], &past, &opts)?;
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    let pred = g.cross_entropy(out.logits, &targets)?;
    let (loss, lq) = match out.lq {
        Some(lq) => {
            let weighted = g.scale(lq, lambda as f32);
            (g.add(pred, weighted)?, g.value(lq).item() as f64)
        }
        None => (pred, 0.0),
    };
    let mut grads = g.backward(loss)?;
    let d = model.config.d_model;
    let m = prefix.len();
    let grads = past
        .iter()
        .map(|&(k, v)| {
            let mut take = |x| grads.take(x).unwrap_or_else(|| Tensor::zeros(&[m, d]));
            (take(k), take(v))
        })
        .collect();
    Ok(TuneLoss {
        loss: g.value(loss).item() as f64,
        pred: g.value(pred).item() as f64,
        lq,
        grads,
    })
}

/// Mean over `seqs` of `L_pred + λ·L_q`, where `L_pred` is the mean
/// next-token loss of each sequence after the prefix and `L_q` the summed
/// squared quantization error of its content rows. Without a quantizer the
/// loss is `L_pred` alone.
pub fn tuning_loss(
    model: &TransformerModel,
    prefix: &KVCache,
    seqs: &[Vec<u32>],
    quant: Option<&dyn ActivationQuantizer>,
    lambda: f64,
) -> Result<TuneLoss> {
    if seqs.is_empty() || prefix.is_empty() {
        return Err(Error::contract("tuning loss needs a non-empty prefix and batch"));
    }
    let parts: Vec<TuneLoss> = seqs
        .par_iter()
        .map(|s| sequence_loss(model, prefix, s, quant, lambda))
        .collect::<Result<_>>()?;
    let inv = 1.0 / seqs.len() as f64;
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.loss += p.loss;
        acc.pred += p.pred;
        acc.lq += p.lq;
        for ((ak, av), (pk, pv)) in acc.grads.iter_mut().zip(&p.grads) {
            *ak = add(ak, pk);
            *av = add(av, pv);
        }
    }
    acc.loss *= inv;
    acc.pred *= inv;
    acc.lq *= inv;
    for (k, v) in acc.grads.iter_mut() {
        *k = k.map(|x| x * inv as f32);
        *v = v.map(|x| x * inv as f32);
    }
    Ok(acc)
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    pub losses: Vec<f64>,
    pub pred: Vec<f64>,
    pub lq: Vec<f64>,
    /// Set when an update produced non-finite values; the prefix returned is
    /// the last finite one.
    pub diverged: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl TuneLog {
    pub fn without_timing(mut self) -> Self {
        self.wall_clock_s = None;
        self
    }
}

/// Tunes `init` with Adam. Static quantization ranges come from `stats`,
/// which should be calibrated with the initial prefix in place.
pub fn tune(
    model: &TransformerModel,
    corpus: &Corpus,
    init: &PrefixCache,
    cfg: &TuneConfig,
    stats: Option<&CalibrationStats>,
) -> Result<(PrefixCache, TuneLog)> {
    cfg.validate()?;
    let start = Instant::now();
    init.cache.check_model(model)?;
    if init.m() + cfg.seq_len > model.config.max_seq_len {
        return Err(Error::ContextOverflow {
            needed: init.m() + cfg.seq_len,
            max: model.config.max_seq_len,
        });
    }
    let quant = FakeQuantizer::new(cfg.quant, stats.cloned())?;
    let seqs: Vec<Vec<u32>> = (0..cfg.num_sequences as u64)
        .map(|i| corpus.sample(Split::Train, cfg.seq_len, cfg.seed, i))
        .collect::<Result<_>>()?;
    let d = model.config.d_model;
    let m = init.m();
    let flat = |c: &KVCache| -> Vec<Vec<f32>> {
        c.layers()
            .iter()
            .flat_map(|(k, v)| [k.to_vec(), v.to_vec()])
            .collect()
    };
    let rebuild = |params: &[Vec<f32>]| -> Result<KVCache> {
        let layers = params
            .chunks(2)
            .map(|kv| {
                (
                    Tensor::from_parts(vec![m, d], kv[0].clone()),
                    Tensor::from_parts(vec![m, d], kv[1].clone()),
                )
            })
            .collect();
        KVCache::from_layers(&model.config, layers)
    };

    let mut params = flat(&init.cache);
    let mut adam = Adam::new(params.iter().map(Vec::len));
    let decay = vec![0.0; params.len()];
    let mut current = init.cache.clone();
    let mut log = TuneLog::default();
    let batches_per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for batch in seqs.chunks(cfg.batch_size) {
            let eval = tuning_loss(model, &current, batch, Some(&quant), cfg.lambda)?;
            if !eval.loss.is_finite() {
                log.diverged = Some(format!("loss became {} at step {step}", eval.loss));
                break 'epochs;
            }
            let mut grads: Vec<Vec<f32>> = eval
                .grads
                .iter()
                .flat_map(|(k, v)| [k.to_vec(), v.to_vec()])
                .collect();
            clip_grads(&mut grads, cfg.grad_clip);
            let mut next = params.clone();
            adam.step(&mut next, &grads, lr_at(step, total, 0, cfg.lr), &decay);
            if next.iter().flatten().any(|x| !x.is_finite()) {
                log.diverged = Some(format!("prefix became non-finite at step {step}"));
                break 'epochs;
            }
            log.losses.push(eval.loss);
            log.pred.push(eval.pred);
            log.lq.push(eval.lq);
            log::info!(
                "tune epoch {epoch} step {step}: loss {:.4} (pred {:.4}, L_q {:.4})",
                eval.loss,
                eval.pred,
                eval.lq
            );
            params = next;
            current = rebuild(&params)?;
            step += 1;
        }
    }
    log.wall_clock_s = Some(start.elapsed().as_secs_f64());
    if let Some(msg) = &log.diverged {
        log::warn!("prefix tuning stopped early: {msg}");
    }
    Ok((
        PrefixCache {
            cache: current,
            provenance: Provenance::Tuned,
            prompt: init.prompt.clone(),
        },
        log,
    ))
}

/// A prefix of `m` positions whose keys and values are drawn from
/// per-channel Gaussians matching the keys and values the model produces
/// on `reference`.
pub fn random_init_prefix(model: &TransformerModel, m: usize, seed: u64, reference: &[u32]) -> Result<PrefixCache> {
    if m == 0 {
        return Err(Error::contract("random prefix needs at least one position"));
    }
    let out = model.forward(reference, &ForwardOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.d_model;
    let mut draw = |t: &Tensor| -> Result<Tensor> {
        let (rows, cols) = t.dims2();
        let mut data = vec![0.0f32; m * cols];
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + c] as f64).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / rows as f64;
            let dist = Normal::new(mean, var.sqrt()).map_err(|e| Error::Numerical(e.to_string()))?;
            for r in 0..m {
                data[r * cols + c] = dist.sample(&mut rng) as f32;
            }
        }
        Tensor::new(&[m, d], data)
    };
    let layers = out
        .kv
        .iter()
        .map(|(k, v)| Ok((draw(k)?, draw(v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrefixCache {
        cache: KVCache::from_layers(&model.config, layers)?,
        provenance: Provenance::RandomInit,
        prompt: Vec::new(),
    })
}
