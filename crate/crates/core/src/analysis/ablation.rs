use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::Result;
use crate::eval::{calibration_set, deploy_and_evaluate, DeployConfig, EvalReport};
use crate::model::{PrefixCache, TransformerModel};
use crate::quant::calibrate;
use crate::tuning::{tune, TuneConfig};

use super::outliers::{csv_err, finish};

pub const ARMS: [&str; 4] = ["no-prefix", "greedy-init", "tuned-lambda-0", "tuned-quant-aware"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Held-out `L_q` never increases from one arm to the next.
    pub monotone: bool,
    /// Share of the total `L_q` reduction achieved by the greedy-init arm.
    pub greedy_share: Option<f64>,
}

impl AblationReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "prefix_len", "lq", "lq_fp", "ppl_fp", "ppl_quant"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.arm.clone(),
                r.eval.prefix_len.to_string(),
                r.eval.lq.to_string(),
                r.eval.lq_fp.to_string(),
                r.eval.ppl_fp.to_string(),
                r.eval.ppl_quant.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

/// Runs the four arms, each adding one component: no prefix, the greedy
/// prefix, the greedy prefix tuned on prediction loss only, and tuned with
/// the quantization-aware loss. Every arm is deployed and evaluated on the
/// same `texts` with the same settings.
pub fn ablation_run(
    model: &TransformerModel,
    corpus: &Corpus,
    greedy: &PrefixCache,
    tune_cfg: &TuneConfig,
    deploy_cfg: &DeployConfig,
    texts: &[Vec<u32>],
) -> Result<AblationReport> {
    let stats = calibrate(model, &calibration_set(corpus, deploy_cfg)?, Some(&greedy.cache))?;
    let plain_cfg = TuneConfig {
        lambda: 0.0,
        ..tune_cfg.clone()
    };
    let (plain, _) = tune(model, corpus, greedy, &plain_cfg, Some(&stats))?;
    let (aware, _) = tune(model, corpus, greedy, tune_cfg, Some(&stats))?;
    let prefixes = [None, Some(&greedy.cache), Some(&plain.cache), Some(&aware.cache)];
    let mut rows = Vec::with_capacity(ARMS.len());
    for (arm, prefix) in ARMS.iter().zip(prefixes) {
        rows.push(AblationRow {
            arm: arm.to_string(),
            eval: deploy_and_evaluate(model, corpus, prefix, deploy_cfg, texts)?,
        });
    }
    let lq: Vec<f64> = rows.iter().map(|r| r.eval.lq).collect();
    let monotone = lq.windows(2).all(|w| w[1] <= w[0]);
    if !monotone {
        log::warn!("held-out L_q is not monotone across ablation arms: {lq:?}");
    }
    let total = lq[0] - lq[3];
    let greedy_share = (total > 0.0).then(|| (lq[0] - lq[1]) / total);
    match greedy_share {
        Some(s) if s > 0.5 => {}
        Some(s) => log::warn!("greedy init accounts for only {:.0}% of the L_q reduction", 100.0 * s),
        None => log::warn!("no L_q reduction across the ablation arms"),
    }
    Ok(AblationReport {
        rows,
        monotone,
        greedy_share,
    })
}
