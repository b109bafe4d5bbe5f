use std::path::Path;
use std::process::{Command, Output};

use cushion_cli::artifacts::bundled_model;
use cushion_cli::config::RunConfig;
use cushion_core::data::Corpus;
use cushion_core::eval::held_out_texts;

fn cushion(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cushion"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr_error(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn eval_fp_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&cushion(&["eval", "--fp"], dir.path()));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["kind"], "eval-fp");
    let cfg = RunConfig::default();
    let corpus = Corpus::bundled();
    let texts = held_out_texts(&corpus, cfg.eval.texts, cfg.eval.text_len).unwrap();
    let expected = bundled_model().unwrap().perplexity_many(&texts, None, None).unwrap();
    assert_eq!(v["ppl_fp"].as_f64().unwrap(), expected);
    assert_eq!(v["prefix_len"], 0);
}

#[test]
fn tiny_tau_keeps_only_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&cushion(&["search", "--tau", "1e-12", "--threads", "1"], dir.path()));
    assert_eq!(v["prompt"], serde_json::json!([256, 10]));
    assert_eq!(v["stop_reason"], "threshold");
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/search-trace.json")).unwrap()).unwrap();
    assert_eq!(trace["kind"], "search-trace");
    assert_eq!(trace["steps"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("out/prefix-greedy.cclb").exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[search]\ntau = -1.0\n").unwrap();
    let o = cushion(&["--config", "bad.toml", "eval", "--fp"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"]["exit_code"], 2);

    std::fs::write(dir.path().join("typo.toml"), "[search]\ntua = 0.5\n").unwrap();
    let o = cushion(&["--config", "typo.toml", "eval", "--fp"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = cushion(&["search", "--tau", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_artifacts_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.cclb"), b"not a checkpoint").unwrap();
    let o = cushion(&["eval", "--fp", "--model", "junk.cclb"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_error(&o)["error"]["exit_code"], 3);

    let o = cushion(&["eval", "--fp", "--prefix", "missing.cclb"], dir.path());
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(dir.path().join("trace.json"), r#"{"schema_version":1,"kind":"tune-log"}"#).unwrap();
    let o = cushion(&["analyze", "cost", "--trace", "trace.json"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergent_tuning_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    stdout_json(&cushion(&["search", "--tau", "1e-12", "--threads", "1"], p));
    std::fs::write(
        p.join("wild.toml"),
        "[tune]\nlr = 3e38\nepochs = 3\nnum_sequences = 2\nbatch_size = 1\nseq_len = 16\ngrad_clip = 1e30\n",
    )
    .unwrap();
    let o = cushion(&["--config", "wild.toml", "tune", "--prefix", "out/prefix-greedy.cclb"], p);
    assert_eq!(o.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stderr_error(&o)["error"]["kind"], "numerical");
    assert!(p.join("out/prefix-tuned.cclb").exists());
}

#[test]
fn written_config_round_trips() {
    let cfg = RunConfig::default().with_seed(17);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

#[test]
fn seeded_search_traces_match_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let a = stdout_json(&cushion(&["--seed", "5", "search", "--tau", "1e-12", "--trace", "a.json"], p));
    let b = stdout_json(&cushion(&["--seed", "5", "search", "--tau", "1e-12", "--trace", "b.json"], p));
    assert_eq!(a["prompt"], b["prompt"]);
    let strip = |name: &str| {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join(name)).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("wall_clock_s");
        for s in v["steps"].as_array_mut().unwrap() {
            s.as_object_mut().unwrap().remove("wall_clock_s");
        }
        v
    };
    assert_eq!(strip("a.json"), strip("b.json"));
}

#[test]
fn bundled_checkpoint_saves_back_to_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cclb");
    bundled_model().unwrap().save(&path).unwrap();
    assert!(std::fs::read(&path).unwrap() == cushion_cli::artifacts::BUNDLED_MODEL);
}
