//! Deployment (smoothing, weight quantization, calibration) and held-out
//! evaluation of perplexity and conditional quantization error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, KVCache, TransformerModel};
use crate::quant::{calibrate, conditional_quant_error, CalibrationStats, FakeQuantizer, QuantSpec};
use crate::taps::Capture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeployConfig {
    /// Fold activation smoothing into the weights before quantizing them.
    pub smooth: bool,
    /// Migration strength.
    pub alpha: f32,
    pub weights: QuantSpec,
    pub activations: QuantSpec,
    pub calib_sequences: usize,
    pub calib_len: usize,
    pub seed: u64,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            smooth: true,
            alpha: 0.8,
            weights: QuantSpec::weight_groupwise(8),
            activations: QuantSpec::per_tensor_static(8),
            calib_sequences: 16,
            calib_len: 128,
            seed: 0,
        }
    }
}

/// A model prepared for quantized inference with a particular prefix.
#[derive(Clone, Debug)]
pub struct Deployment {
    pub model: TransformerModel,
    /// Activation ranges of the deployed model, observed with the prefix.
    pub stats: CalibrationStats,
    /// Activation ranges of the full-precision model, observed with the prefix.
    pub fp_stats: CalibrationStats,
    pub spec: QuantSpec,
}

impl Deployment {
    pub fn quantizer(&self) -> Result<FakeQuantizer> {
        FakeQuantizer::new(self.spec, Some(self.stats.clone()))
    }
}

/// Calibration sequences drawn from the training split.
pub fn calibration_set(corpus: &Corpus, cfg: &DeployConfig) -> Result<Vec<Vec<u32>>> {
    if cfg.calib_sequences == 0 {
        return Err(Error::Config("calibration needs at least one sequence".into()));
    }
    (0..cfg.calib_sequences as u64)
        .map(|i| corpus.sample(Split::Train, cfg.calib_len, cfg.seed ^ 0xca11b, i))
        .collect()
}

/// Calibrates with `prefix` in place, folds in smoothing, quantizes the
/// weights, and recalibrates the result.
pub fn deploy(model: &TransformerModel, corpus: &Corpus, prefix: Option<&KVCache>, cfg: &DeployConfig) -> Result<Deployment> {
    cfg.weights.validate()?;
    cfg.activations.validate()?;
    let seqs = calibration_set(corpus, cfg)?;
    let fp_stats = calibrate(model, &seqs, prefix)?;
    let smoothed = if cfg.smooth {
        model.smooth(&fp_stats, cfg.alpha)?
    } else {
        model.clone()
    };
    let deployed = smoothed.quantize_weights(&cfg.weights)?;
    let stats = calibrate(&deployed, &seqs, prefix)?;
    Ok(Deployment {
        model: deployed,
        stats,
        fp_stats,
        spec: cfg.activations,
    })
}

/// Held-out windows used for evaluation: consecutive, non-overlapping.
pub fn held_out_texts(corpus: &Corpus, count: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    let w = corpus.windows(Split::HeldOut, len, count)?;
    if w.len() < count {
        log::warn!("held-out split holds only {} windows of {len} tokens", w.len());
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prefix_len: usize,
    pub texts: usize,
    pub text_len: usize,
    /// Full-precision perplexity.
    pub ppl_fp: f64,
    /// Perplexity of the deployed model with fake-quantized activations.
    pub ppl_quant: f64,
    /// Mean conditional quantization error of the deployed model's taps.
    pub lq: f64,
    /// Mean conditional quantization error of the full-precision model's
    /// taps under ranges calibrated on it.
    pub lq_fp: f64,
    pub lq_per_text: Vec<f64>,
    pub spec: QuantSpec,
}

fn mean_lq(model: &TransformerModel, texts: &[Vec<u32>], prefix: Option<&KVCache>, spec: &QuantSpec, stats: &CalibrationStats) -> Result<Vec<f64>> {
    let opts = ForwardOptions::default().with_prefix(prefix).with_capture(Capture::TAPS);
    texts
        .par_iter()
        .map(|t| {
            let out = model.forward(t, &opts)?;
            Ok(conditional_quant_error(&out.taps, spec, Some(stats))?.total)
        })
        .collect()
}

pub fn evaluate(fp: &TransformerModel, dep: &Deployment, prefix: Option<&KVCache>, texts: &[Vec<u32>]) -> Result<EvalReport> {
    if texts.is_empty() {
        return Err(Error::contract("evaluation needs at least one text"));
    }
    let prefix = prefix.filter(|p| !p.is_empty());
    let quant = dep.quantizer()?;
    let ppl_fp = fp.perplexity_many(texts, prefix, None)?;
    let ppl_quant = dep.model.perplexity_many(texts, prefix, Some(&quant))?;
    let lq_per_text = mean_lq(&dep.model, texts, prefix, &dep.spec, &dep.stats)?;
    let lq_fp = mean_lq(fp, texts, prefix, &dep.spec, &dep.fp_stats)?;
    let n = texts.len() as f64;
    Ok(EvalReport {
        prefix_len: prefix.map_or(0, KVCache::len),
        texts: texts.len(),
        text_len: texts[0].len(),
        ppl_fp,
        ppl_quant,
        lq: lq_per_text.iter().sum::<f64>() / n,
        lq_fp: lq_fp.iter().sum::<f64>() / n,
        lq_per_text,
        spec: dep.spec,
    })
}

/// Deploys with `prefix` and evaluates on `texts` in one call.
pub fn deploy_and_evaluate(
    model: &TransformerModel,
    corpus: &Corpus,
    prefix: Option<&KVCache>,
    cfg: &DeployConfig,
    texts: &[Vec<u32>],
) -> Result<EvalReport> {
    let dep = deploy(model, corpus, prefix, cfg)?;
    evaluate(model, &dep, prefix, texts)
}
