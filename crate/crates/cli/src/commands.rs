use std::path::{Path, PathBuf};

use cushion_core::analysis::{
    ablation_run, attention_map, cost_report, outlier_stats, plot, sink_report, OutlierReport, SinkReport,
};
use cushion_core::data::{describe, Corpus};
use cushion_core::eval::{calibration_set, deploy_and_evaluate, held_out_texts};
use cushion_core::model::{train_toy, PrefixCache, TransformerModel};
use cushion_core::quant::{calibrate, CalibrationStats};
use cushion_core::search::{greedy_search, SearchTrace};
use cushion_core::tuning::{tune, TuneLog};
use cushion_core::{Error, Result};
use serde::Serialize;

use crate::artifacts::{load_model, read_json, write_json, write_text};
use crate::config::RunConfig;
use crate::{Cli, Command, Report};

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_path(given: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn load_prefix(path: Option<&Path>, model: &TransformerModel) -> Result<Option<PrefixCache>> {
    path.map(|p| PrefixCache::load(p, &model.config)).transpose()
}

/// FP perplexity only.
#[derive(Debug, Serialize)]
pub struct FpEval {
    pub prefix_len: usize,
    pub texts: usize,
    pub text_len: usize,
    pub ppl_fp: f64,
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let corpus = cfg.corpus.load()?;
    match &cli.command {
        Command::Train { out, steps } => {
            let mut tc = cfg.train;
            if let Some(s) = steps {
                tc.steps = *s;
            }
            let (model, log) = train_toy(cfg.model, &corpus.train, &tc)?;
            let path = out_path(out, &cfg, "model.cclb");
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            model.save(&path)?;
            write_json(&path.with_extension("train.json"), "train-log", &log)?;
            println!("{}", serde_json::json!({ "model": path, "final_loss": log.final_loss }));
        }
        Command::Calibrate { model, prefix, out } => {
            let model = load_model(model.as_deref())?;
            let prefix = load_prefix(prefix.as_deref(), &model)?;
            let stats = calibrate(&model, &calibration_set(&corpus, &cfg.deploy)?, prefix.as_ref().map(|p| &p.cache))?;
            let path = out_path(out, &cfg, "calibration.cclb");
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            stats.save(&path)?;
            println!("{}", serde_json::json!({ "stats": path, "taps": stats.taps.len() }));
        }
        Command::Search {
            model,
            stats,
            tau,
            max_len,
            threads,
            out,
            trace,
        } => {
            let model = load_model(model.as_deref())?;
            let stats = stats.as_deref().map(CalibrationStats::load).transpose()?;
            let mut sc = cfg.search.clone();
            if let Some(t) = tau {
                sc.tau = *t;
            }
            if let Some(m) = max_len {
                sc.max_len = *m;
            }
            let run = || greedy_search(&model, &corpus, &sc, stats.as_ref());
            let t = match threads {
                Some(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(*n)
                    .build()
                    .map_err(|e| Error::Config(e.to_string()))?
                    .install(run)?,
                None => run()?,
            };
            let prefix = model.extract_prefix_cache(&t.prompt)?;
            let path = out_path(out, &cfg, "prefix-greedy.cclb");
            write_prefix(&path, &prefix)?;
            write_json(&out_path(trace, &cfg, "search-trace.json"), "search-trace", &t)?;
            println!(
                "{}",
                serde_json::json!({ "prefix": path, "prompt": t.prompt, "text": describe(&t.prompt), "stop_reason": t.stop_reason })
            );
        }
        Command::Tune {
            model,
            prefix,
            stats,
            lambda,
            epochs,
            out,
            log,
        } => {
            let model = load_model(model.as_deref())?;
            let init = PrefixCache::load(prefix, &model.config)?;
            let mut tc = cfg.tune.clone();
            if let Some(l) = lambda {
                tc.lambda = *l;
            }
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let stats = match stats {
                Some(p) => CalibrationStats::load(p)?,
                None => calibrate(&model, &calibration_set(&corpus, &cfg.deploy)?, Some(&init.cache))?,
            };
            let (tuned, tlog) = tune(&model, &corpus, &init, &tc, Some(&stats))?;
            let path = out_path(out, &cfg, "prefix-tuned.cclb");
            write_prefix(&path, &tuned)?;
            write_json(&out_path(log, &cfg, "tune-log.json"), "tune-log", &tlog)?;
            if let Some(msg) = &tlog.diverged {
                return Err(Error::Numerical(format!("{msg}; last finite prefix written to {}", path.display())));
            }
            println!("{}", serde_json::json!({ "prefix": path, "steps": tlog.losses.len() }));
        }
        Command::Eval { model, prefix, fp, out } => {
            let model = load_model(model.as_deref())?;
            let prefix = load_prefix(prefix.as_deref(), &model)?;
            let cache = prefix.as_ref().map(|p| &p.cache);
            let texts = held_out_texts(&corpus, cfg.eval.texts, cfg.eval.text_len)?;
            let json = if *fp {
                let r = FpEval {
                    prefix_len: cache.map_or(0, |c| c.len()),
                    texts: texts.len(),
                    text_len: cfg.eval.text_len,
                    ppl_fp: model.perplexity_many(&texts, cache, None)?,
                };
                crate::artifacts::to_json("eval-fp", &r)?
            } else {
                crate::artifacts::to_json("eval", &deploy_and_evaluate(&model, &corpus, cache, &cfg.deploy, &texts)?)?
            };
            if let Some(p) = out {
                write_text(p, &json)?;
            }
            print!("{json}");
        }
        Command::Analyze {
            report,
            model,
            prefix,
            trace,
            tune_log,
            plot,
            out_dir,
        } => {
            let dir = out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir)?;
            match report {
                Report::Cost => {
                    let trace: Option<SearchTrace> = trace.as_deref().map(|p| read_json(p, "search-trace")).transpose()?;
                    let log: Option<TuneLog> = tune_log.as_deref().map(|p| read_json(p, "tune-log")).transpose()?;
                    let r = cost_report(&trace.iter().collect::<Vec<_>>(), log.as_ref());
                    write_json(&dir.join("cost.json"), "cost", &r)?;
                }
                _ => {
                    let model = load_model(model.as_deref())?;
                    let prefix = load_prefix(prefix.as_deref(), &model)?;
                    analyze(*report, &model, &corpus, prefix.as_ref(), &cfg, &dir, *plot)?;
                }
            }
            println!("{}", serde_json::json!({ "out_dir": dir }));
        }
        Command::Demo { out_dir, train } => {
            let dir = out_dir.clone().unwrap_or_else(|| cfg.output_dir.join("demo"));
            let summary = crate::demo::run_demo(&cfg, &corpus, &dir, *train)?;
            print!("{}", crate::artifacts::to_json("demo-summary", &summary)?);
        }
    }
    Ok(())
}

pub fn write_prefix(path: &Path, p: &PrefixCache) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    p.save(path)
}

fn label(prefix: Option<&PrefixCache>) -> String {
    match prefix {
        None => "none".into(),
        Some(p) => serde_json::to_value(p.provenance)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    }
}

pub fn outlier_pair(
    model: &TransformerModel,
    corpus: &Corpus,
    prefix: Option<&PrefixCache>,
    cfg: &RunConfig,
) -> Result<Vec<OutlierReport>> {
    let texts = held_out_texts(corpus, cfg.analysis.outlier_texts, cfg.analysis.outlier_len)?;
    let mut out = vec![outlier_stats(model, &texts, None, "none", &cfg.analysis.layers)?];
    if let Some(p) = prefix {
        out.push(outlier_stats(model, &texts, Some(&p.cache), &label(Some(p)), &cfg.analysis.layers)?);
    }
    Ok(out)
}

pub fn sink_pair(
    model: &TransformerModel,
    corpus: &Corpus,
    prefix: Option<&PrefixCache>,
    cfg: &RunConfig,
    dir: &Path,
    plot_it: bool,
) -> Result<Vec<SinkReport>> {
    let text = held_out_texts(corpus, 1, cfg.analysis.sink_text_len)?.remove(0);
    let mut reports = Vec::new();
    for p in [None, prefix].into_iter().take(if prefix.is_some() { 2 } else { 1 }) {
        let (r, rec) = sink_report(model, &text, p.map(|p| &p.cache))?;
        if plot_it {
            let tag = label(p);
            for layer in 0..rec.attention.len() {
                let map = attention_map(&rec, layer, None)?;
                let title = format!("layer {layer}, mean over heads, prefix: {tag}");
                write_text(
                    &dir.join(format!("attention-{tag}-layer{layer}.svg")),
                    &plot::heatmap(&title, &map, Some(r.prefix_len)),
                )?;
            }
        }
        reports.push(r);
    }
    Ok(reports)
}

pub fn outlier_plot(reports: &[OutlierReport]) -> String {
    let x: Vec<f64> = reports[0].layers.iter().map(|l| l.layer as f64).collect();
    let mut series = Vec::new();
    for r in reports {
        series.push((format!("top-1 ({})", r.prefix), r.layers.iter().map(|l| l.stats.top1).collect()));
        series.push((format!("median ({})", r.prefix), r.layers.iter().map(|l| l.stats.median).collect()));
    }
    plot::line_plot("block input magnitudes", "layer", &x, &series, true)
}

fn analyze(
    report: Report,
    model: &TransformerModel,
    corpus: &Corpus,
    prefix: Option<&PrefixCache>,
    cfg: &RunConfig,
    dir: &Path,
    plot_it: bool,
) -> Result<()> {
    match report {
        Report::Outliers => {
            let reports = outlier_pair(model, corpus, prefix, cfg)?;
            write_json(&dir.join("outliers.json"), "outliers", &reports)?;
            let csv: String = reports
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let c = r.to_csv()?;
                    Ok(if i == 0 { c } else { c.lines().skip(1).map(|l| format!("{l}\n")).collect() })
                })
                .collect::<Result<_>>()?;
            write_text(&dir.join("outliers.csv"), &csv)?;
            if plot_it {
                write_text(&dir.join("outliers.svg"), &outlier_plot(&reports))?;
            }
        }
        Report::Sinks => {
            let reports = sink_pair(model, corpus, prefix, cfg, dir, plot_it)?;
            write_json(&dir.join("sinks.json"), "sinks", &reports)?;
            let csv: String = reports
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let c = r.to_csv()?;
                    Ok(if i == 0 { c } else { c.lines().skip(1).map(|l| format!("{l}\n")).collect() })
                })
                .collect::<Result<_>>()?;
            write_text(&dir.join("sinks.csv"), &csv)?;
        }
        Report::Ablation => {
            let greedy = prefix.ok_or_else(|| Error::Config("the ablation needs --prefix (a greedy-searched prefix)".into()))?;
            let texts = held_out_texts(corpus, cfg.eval.texts, cfg.eval.text_len)?;
            let r = ablation_run(model, corpus, greedy, &cfg.tune, &cfg.deploy, &texts)?;
            write_json(&dir.join("ablation.json"), "ablation", &r)?;
            write_text(&dir.join("ablation.csv"), &r.to_csv()?)?;
        }
        Report::Cost => unreachable!("handled by the caller"),
    }
    Ok(())
}
