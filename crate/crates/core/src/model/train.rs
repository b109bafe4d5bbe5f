use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::BOS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::TransformerConfig;
use super::forward::ForwardOptions;
use super::{trainable_vars, TransformerModel};
use crate::optim::{clip_grads, lr_at, Adam};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training sequence, including the leading BOS.
    pub seq_len: usize,
    pub lr: f32,
    pub warmup: usize,
    pub grad_clip: f32,
    /// Decoupled weight decay on matrices (norm gains and biases excluded).
    pub weight_decay: f32,
    pub seed: u64,
}

/// The defaults reproduce the bundled toy checkpoint.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            seq_len: 160,
            lr: 3e-3,
            warmup: 50,
            grad_clip: 1.0,
            weight_decay: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
    pub final_loss: f32,
}

impl TransformerModel {
    /// Mean next-token loss of one sequence and the gradient of every weight.
    fn sequence_grads(&self, seq: &[u32]) -> Result<(f32, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let out = self.forward_graph(&mut g, &vars, &seq[..seq.len() - 1], &[], &ForwardOptions::default())?;
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy(out.logits, &targets)?;
        let mut grads = g.backward(loss)?;
        let params = trainable_vars(&vars);
        let gs = params
            .iter()
            .map(|&p| {
                grads
                    .take(p)
                    .map(|t| t.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(p).numel()])
            })
            .collect();
        Ok((g.value(loss).item(), gs))
    }
}

/// Draws `[BOS] ∥ window` training sequences of `seq_len` tokens.
pub(crate) fn draw_sequence(rng: &mut impl Rng, tokens: &[u32], seq_len: usize) -> Vec<u32> {
    let body = seq_len - 1;
    let start = rng.random_range(0..=tokens.len() - body);
    let mut s = Vec::with_capacity(seq_len);
    s.push(BOS);
    s.extend_from_slice(&tokens[start..start + body]);
    s
}

/// Trains a fresh model on `tokens`. Every sequence starts with BOS followed
/// by a uniformly drawn corpus window. Deterministic for a fixed seed.
pub fn train_toy(config: TransformerConfig, tokens: &[u32], tc: &TrainConfig) -> Result<(TransformerModel, TrainLog)> {
    train_from(TransformerModel::init(config, tc.seed)?, tokens, tc)
}

/// Continues training `model`.
pub fn train_from(model: TransformerModel, tokens: &[u32], tc: &TrainConfig) -> Result<(TransformerModel, TrainLog)> {
    if tc.seq_len < 2 || tc.batch_size == 0 {
        return Err(Error::Config("training needs seq_len >= 2 and batch_size >= 1".into()));
    }
    if tc.seq_len > model.config.max_seq_len {
        return Err(Error::ContextOverflow {
            needed: tc.seq_len,
            max: model.config.max_seq_len,
        });
    }
    if tokens.len() < tc.seq_len - 1 {
        return Err(Error::CorpusTooShort {
            len: tokens.len(),
            needed: tc.seq_len - 1,
        });
    }
    let config = model.config;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut params: Vec<Vec<f32>> = model.named_tensors().iter().map(|(_, t)| t.to_vec()).collect();
    if names.iter().any(|n| n.ends_with(".smooth")) {
        return Err(Error::contract("cannot train a model with smoothing divisors folded in"));
    }
    let decay: Vec<f32> = shapes
        .iter()
        .map(|s| if s.len() == 2 { tc.weight_decay } else { 0.0 })
        .collect();
    let mut adam = Adam::new(params.iter().map(Vec::len));
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut log = TrainLog::default();
    let mut current = model;

    for step in 0..tc.steps {
        let batch: Vec<Vec<u32>> = (0..tc.batch_size)
            .map(|_| draw_sequence(&mut rng, tokens, tc.seq_len))
            .collect();
        let results: Vec<Result<(f32, Vec<Vec<f32>>)>> =
            batch.par_iter().map(|s| current.sequence_grads(s)).collect();
        let mut total = vec![Vec::new(); params.len()];
        let mut loss = 0.0f32;
        for r in results {
            let (l, gs) = r?;
            loss += l;
            for (acc, g) in total.iter_mut().zip(gs) {
                if acc.is_empty() {
                    *acc = g;
                } else {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        let inv = 1.0 / tc.batch_size as f32;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {loss} at step {step} (lr {})",
                lr_at(step, tc.steps, tc.warmup, tc.lr)
            )));
        }
        total.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= inv);
        clip_grads(&mut total, tc.grad_clip);
        adam.step(&mut params, &total, lr_at(step, tc.steps, tc.warmup, tc.lr), &decay);
        log.losses.push(loss);
        if step % 50 == 0 || step + 1 == tc.steps {
            log::info!("train step {step}/{}: loss {loss:.4}", tc.steps);
        }
        let named = names
            .iter()
            .zip(&params)
            .zip(&shapes)
            .map(|((n, p), s)| (n.clone(), Tensor::from_parts(s.clone(), p.clone())))
            .collect();
        current = TransformerModel::from_named(config, named)?;
    }
    log.final_loss = log.losses.last().copied().unwrap_or(f32::NAN);
    Ok((current, log))
}
