//! Greedy, early-stopped search for a prompt whose cached keys/values
//! minimize the conditional quantization error of the text that follows.
//!
//! Each step draws a fresh text `t`, scores every vocabulary entry `c` by
//! `L_q(t | p ∥ c)`, and appends the argmin `c*` only if
//! `L_q(t | p ∥ c*) < τ · L_q(t | p)`; otherwise the search stops.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split, BOS, NEWLINE};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, KVCache, TransformerModel};
use crate::quant::{conditional_quant_error, CalibrationStats, QuantSpec};
use crate::taps::Capture;

fn default_seeds() -> Vec<String> {
    vec!["bos".into(), "newline".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Maximum prompt length, seeds included.
    pub max_len: usize,
    pub tau: f64,
    /// Named seed tokens: `bos`, `newline`, `space`, or `byte:N`.
    pub seeds: Vec<String>,
    /// Candidates scored per parallel work item.
    pub batch_size: usize,
    /// Tokens per drawn text.
    pub text_len: usize,
    pub seed: u64,
    /// Reuse one text for every step instead of drawing a fresh one.
    pub fixed_text: bool,
    pub quant: QuantSpec,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            tau: 0.5,
            seeds: default_seeds(),
            batch_size: 32,
            text_len: 128,
            seed: 0,
            fixed_text: false,
            quant: QuantSpec::per_tensor_dynamic(8),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive and finite, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("search batch_size must be at least 1".into()));
        }
        if self.text_len < 1 {
            return Err(Error::Config("search text_len must be positive".into()));
        }
        self.quant.validate()
    }
}

pub fn parse_seed(name: &str) -> Result<u32> {
    match name {
        "bos" => Ok(BOS),
        "newline" => Ok(NEWLINE),
        "space" => Ok(32),
        _ => name
            .strip_prefix("byte:")
            .and_then(|n| n.parse::<u32>().ok())
            .filter(|&b| b < 256)
            .ok_or_else(|| Error::Config(format!("unknown seed token `{name}`"))),
    }
}

/// The initial prompt: the configured seeds, in order.
pub fn seed_prompt(cfg: &SearchConfig) -> Result<Vec<u32>> {
    cfg.seeds.iter().map(|s| parse_seed(s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    MaxLength,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub step: usize,
    /// Sample index of the drawn text.
    pub text_index: u64,
    pub chosen: u32,
    pub lq_before: f64,
    pub lq_after: f64,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub seeds: Vec<u32>,
    pub prompt: Vec<u32>,
    pub steps: Vec<SearchStep>,
    pub stop_reason: StopReason,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl SearchTrace {
    /// Drops wall-clock fields so traces from identical runs compare equal.
    pub fn without_timing(mut self) -> Self {
        self.wall_clock_s = None;
        for s in &mut self.steps {
            s.wall_clock_s = None;
        }
        self
    }
}

/// Quantization settings used to score a text.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a TransformerModel,
    pub spec: &'a QuantSpec,
    pub stats: Option<&'a CalibrationStats>,
}

impl Scorer<'_> {
    /// `L_q(text | cache)`: ranges and error over the text rows only.
    pub fn score(&self, text: &[u32], cache: Option<&KVCache>) -> Result<f64> {
        let cache = cache.filter(|c| !c.is_empty());
        let opts = ForwardOptions::default().with_prefix(cache).with_capture(Capture::TAPS);
        let out = self.model.forward(text, &opts)?;
        Ok(conditional_quant_error(&out.taps, self.spec, self.stats)?.total)
    }

    fn prompt_cache(&self, prompt: &[u32]) -> Result<KVCache> {
        let mut cache = KVCache::empty(&self.model.config);
        self.model.decode_step(&mut cache, prompt)?;
        Ok(cache)
    }

    fn score_one(&self, text: &[u32], base: &KVCache, c: u32) -> Result<f64> {
        let mut cache = base.clone();
        self.model.decode_step(&mut cache, &[c])?;
        self.score(text, Some(&cache))
    }

    /// `L_q(text | prompt ∥ c)` for each candidate, scored in parallel work
    /// items of `batch_size` candidates. The prompt's cache is computed once
    /// and extended by one token per candidate.
    pub fn score_candidates(&self, text: &[u32], prompt: &[u32], candidates: &[u32], batch_size: usize) -> Result<Vec<f64>> {
        let base = self.prompt_cache(prompt)?;
        let chunks: Vec<Vec<f64>> = candidates
            .par_chunks(batch_size.max(1))
            .map(|chunk| chunk.iter().map(|&c| self.score_one(text, &base, c)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}

/// Index of the smallest score; the earliest index wins ties.
pub fn argmin(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s >= scores[b] => {}
            _ if s.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Runs the greedy search on texts drawn from the training split.
pub fn greedy_search(
    model: &TransformerModel,
    corpus: &Corpus,
    cfg: &SearchConfig,
    stats: Option<&CalibrationStats>,
) -> Result<SearchTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let seeds = seed_prompt(cfg)?;
    if seeds.len() > cfg.max_len {
        return Err(Error::Config(format!(
            "{} seed tokens exceed the prompt budget of {}",
            seeds.len(),
            cfg.max_len
        )));
    }
    let scorer = Scorer {
        model,
        spec: &cfg.quant,
        stats,
    };
    let vocab: Vec<u32> = (0..model.config.vocab_size as u32).collect();
    let mut prompt = seeds.clone();
    let mut steps = Vec::new();
    let mut stop_reason = StopReason::MaxLength;
    while prompt.len() < cfg.max_len {
        let t0 = Instant::now();
        let step = steps.len();
        let text_index = if cfg.fixed_text { 0 } else { step as u64 };
        let text = corpus.sample(Split::Train, cfg.text_len, cfg.seed, text_index)?;
        let base = if prompt.is_empty() {
            None
        } else {
            Some(scorer.prompt_cache(&prompt)?)
        };
        let before = scorer.score(&text, base.as_ref())?;
        let scores = scorer.score_candidates(&text, &prompt, &vocab, cfg.batch_size)?;
        let best = argmin(&scores).ok_or_else(|| Error::Numerical("every candidate scored NaN".into()))?;
        let after = scores[best];
        let accepted = after < cfg.tau * before;
        log::info!(
            "search step {step}: best token {best} L_q {after:.4} vs {before:.4} ({})",
            if accepted { "accepted" } else { "stop" }
        );
        steps.push(SearchStep {
            step,
            text_index,
            chosen: vocab[best],
            lq_before: before,
            lq_after: after,
            accepted,
            wall_clock_s: Some(t0.elapsed().as_secs_f64()),
        });
        if !accepted {
            stop_reason = StopReason::Threshold;
            break;
        }
        prompt.push(vocab[best]);
    }
    Ok(SearchTrace {
        seeds,
        prompt,
        steps,
        stop_reason,
        tau: cfg.tau,
        wall_clock_s: Some(start.elapsed().as_secs_f64()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds() {
        assert_eq!(seed_prompt(&SearchConfig::default()).unwrap(), vec![256, 10]);
        let cfg = SearchConfig {
            seeds: vec![],
            ..SearchConfig::default()
        };
        assert!(seed_prompt(&cfg).unwrap().is_empty());
        assert_eq!(parse_seed("byte:46").unwrap(), 46);
        assert!(matches!(parse_seed("comma"), Err(Error::Config(_))));
        assert!(parse_seed("byte:256").is_err());
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin(&[f64::NAN, 2.0, 2.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }
}
