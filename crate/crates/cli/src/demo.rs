//! The full pipeline on one corpus: search, tune, deploy, evaluate and
//! analyze, writing every artifact into one directory.

use std::path::Path;
use std::time::Instant;

use cushion_core::analysis::{ablation_run, cost_report, CostReport};
use cushion_core::data::{describe, Corpus, BOS};
use cushion_core::eval::{calibration_set, deploy_and_evaluate, held_out_texts, EvalReport};
use cushion_core::model::train_toy;
use cushion_core::quant::calibrate;
use cushion_core::search::{greedy_search, StopReason};
use cushion_core::tuning::tune;
use cushion_core::Result;
use serde::{Deserialize, Serialize};

use crate::artifacts::{bundled_model, write_json, write_text};
use crate::commands::{outlier_pair, outlier_plot, sink_pair, write_prefix};
use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArm {
    pub arm: String,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub prompt: Vec<u32>,
    pub prompt_text: String,
    pub stop_reason: StopReason,
    pub ppl_quant_no_prefix: f64,
    pub ppl_quant_cushion: f64,
    pub lq_no_prefix: f64,
    pub lq_cushion: f64,
    /// `1 − lq_cushion / lq_no_prefix`.
    pub lq_reduction: f64,
    pub sink_prefix_mass: f64,
    pub sink_uniform_baseline: f64,
    pub greedy_share: Option<f64>,
    pub ablation_monotone: bool,
    /// Files whose bytes depend only on the config and seed.
    pub deterministic_files: Vec<String>,
    /// Files holding wall-clock measurements.
    pub timing_files: Vec<String>,
}

pub fn run_demo(cfg: &RunConfig, corpus: &Corpus, dir: &Path, train: bool) -> Result<DemoSummary> {
    std::fs::create_dir_all(dir)?;
    let mut files: Vec<String> = Vec::new();
    let mut note = |name: &str| files.push(name.to_string());

    let model = if train {
        log::info!("training a fresh model ({} steps)", cfg.train.steps);
        let (m, tlog) = train_toy(cfg.model, &corpus.train, &cfg.train)?;
        m.save(&dir.join("model.cclb"))?;
        write_json(&dir.join("train-log.json"), "train-log", &tlog)?;
        note("model.cclb");
        note("train-log.json");
        m
    } else {
        bundled_model()?
    };

    log::info!("greedy search");
    let trace = greedy_search(&model, corpus, &cfg.search, None)?;
    let greedy = model.extract_prefix_cache(&trace.prompt)?;
    write_prefix(&dir.join("prefix-greedy.cclb"), &greedy)?;
    write_json(&dir.join("search-trace.json"), "search-trace", &trace.clone().without_timing())?;
    note("prefix-greedy.cclb");
    note("search-trace.json");

    log::info!("prefix tuning");
    let calib = calibration_set(corpus, &cfg.deploy)?;
    let stats = calibrate(&model, &calib, Some(&greedy.cache))?;
    let (tuned, tlog) = tune(&model, corpus, &greedy, &cfg.tune, Some(&stats))?;
    write_prefix(&dir.join("prefix-tuned.cclb"), &tuned)?;
    write_json(&dir.join("tune-log.json"), "tune-log", &tlog.clone().without_timing())?;
    note("prefix-tuned.cclb");
    note("tune-log.json");

    log::info!("evaluation");
    let texts = held_out_texts(corpus, cfg.eval.texts, cfg.eval.text_len)?;
    let bos = model.extract_prefix_cache(&[BOS])?;
    let mut arms = Vec::new();
    for (arm, p) in [
        ("no-prefix", None),
        ("bos-only", Some(&bos.cache)),
        ("greedy-init", Some(&greedy.cache)),
        ("cushion", Some(&tuned.cache)),
    ] {
        arms.push(EvalArm {
            arm: arm.into(),
            eval: deploy_and_evaluate(&model, corpus, p, &cfg.deploy, &texts)?,
        });
    }
    write_json(&dir.join("eval.json"), "eval-arms", &arms)?;
    note("eval.json");

    log::info!("analysis");
    let outliers = outlier_pair(&model, corpus, Some(&tuned), cfg)?;
    write_json(&dir.join("outliers.json"), "outliers", &outliers)?;
    write_text(&dir.join("outliers.svg"), &outlier_plot(&outliers))?;
    note("outliers.json");
    note("outliers.svg");
    let sinks = sink_pair(&model, corpus, Some(&tuned), cfg, dir, true)?;
    write_json(&dir.join("sinks.json"), "sinks", &sinks)?;
    write_text(&dir.join("sinks.csv"), &sinks[1].to_csv()?)?;
    note("sinks.json");
    note("sinks.csv");
    for layer in 0..model.config.n_layers {
        note(&format!("attention-none-layer{layer}.svg"));
        note(&format!("attention-tuned-layer{layer}.svg"));
    }

    log::info!("ablation");
    let ablation = ablation_run(&model, corpus, &greedy, &cfg.tune, &cfg.deploy, &texts)?;
    write_json(&dir.join("ablation.json"), "ablation", &ablation)?;
    write_text(&dir.join("ablation.csv"), &ablation.to_csv()?)?;
    note("ablation.json");
    note("ablation.csv");

    let cost: CostReport = cost_report(&[&trace], Some(&tlog));
    write_json(&dir.join("cost.json"), "cost", &cost)?;

    let none = &arms[0].eval;
    let cushion = &arms[3].eval;
    let summary = DemoSummary {
        prompt_text: describe(&trace.prompt),
        prompt: trace.prompt.clone(),
        stop_reason: trace.stop_reason,
        ppl_quant_no_prefix: none.ppl_quant,
        ppl_quant_cushion: cushion.ppl_quant,
        lq_no_prefix: none.lq,
        lq_cushion: cushion.lq,
        lq_reduction: 1.0 - cushion.lq / none.lq,
        sink_prefix_mass: sinks[1].mean_prefix_mass,
        sink_uniform_baseline: sinks[1].uniform_baseline,
        greedy_share: ablation.greedy_share,
        ablation_monotone: ablation.monotone,
        deterministic_files: files,
        timing_files: vec!["cost.json".into()],
    };
    write_json(&dir.join("summary.json"), "demo-summary", &summary)?;
    Ok(summary)
}

/// Runs the demo and returns its summary with the elapsed wall-clock time.
pub fn timed_demo(cfg: &RunConfig, corpus: &Corpus, dir: &Path, train: bool) -> Result<(DemoSummary, f64)> {
    let t = Instant::now();
    let s = run_demo(cfg, corpus, dir, train)?;
    Ok((s, t.elapsed().as_secs_f64()))
}
