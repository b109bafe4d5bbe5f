use cushion_core::data::{Corpus, Split, VOCAB_SIZE};
use cushion_core::model::*;
use cushion_core::quant::{calibrate, conditional_quant_error, FakeQuantizer, LinearizedQuantizer, QuantSpec};
use cushion_core::search::{greedy_search, Scorer, SearchConfig, StopReason};
use cushion_core::taps::Capture;
use cushion_core::tuning::{random_init_prefix, tune, tuning_loss, TuneConfig};
use cushion_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> TransformerConfig {
    TransformerConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 96,
        ..TransformerConfig::llama_ish()
    }
}

/// Weights scaled up from the init so gradients are not vanishingly small.
fn model(cfg: TransformerConfig, seed: u64) -> TransformerModel {
    let m = TransformerModel::init(cfg, seed).unwrap();
    let named = m
        .named_tensors()
        .into_iter()
        .map(|(n, t)| {
            let t = if t.shape().len() == 2 { t.map(|x| x * 8.0) } else { t };
            (n, t)
        })
        .collect();
    TransformerModel::from_named(cfg, named).unwrap()
}

fn perturbed(cache: &KVCache, dir: &[(Tensor, Tensor)], eps: f32, cfg: &TransformerConfig) -> KVCache {
    let d = cfg.d_model;
    let layers = cache
        .layers()
        .iter()
        .zip(dir)
        .map(|((k, v), (dk, dv))| {
            let shift = |a: &Tensor, b: &Tensor| {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + eps * y).collect();
                Tensor::new(&[cache.len(), d], data).unwrap()
            };
            (shift(k, dk), shift(v, dv))
        })
        .collect();
    KVCache::from_layers(cfg, layers).unwrap()
}

fn random_direction(cache: &KVCache, seed: u64) -> Vec<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cache.layers()[0].0.numel() / cache.len();
    let mut draw = || Tensor::from_fn(&[cache.len(), d], |_| rng.random_range(-1.0f32..1.0));
    (0..cache.n_layers()).map(|_| (draw(), draw())).collect()
}

/// Mostly along the gradient, so the directional derivative is large
/// compared with f32 rounding in the loss.
fn probe_direction(grads: &[(Tensor, Tensor)], cache: &KVCache, seed: u64) -> Vec<(Tensor, Tensor)> {
    let max = grads
        .iter()
        .flat_map(|(k, v)| k.data().iter().chain(v.data()))
        .fold(0.0f32, |a, x| a.max(x.abs()));
    random_direction(cache, seed)
        .into_iter()
        .zip(grads)
        .map(|((rk, rv), (gk, gv))| {
            let mix = |r: &Tensor, g: &Tensor| {
                let data = r.data().iter().zip(g.data()).map(|(r, g)| g / max + 0.25 * r).collect();
                Tensor::new(r.shape(), data).unwrap()
            };
            (mix(&rk, gk), mix(&rv, gv))
        })
        .collect()
}

/// Central difference with one Richardson step, cancelling the O(eps²) term.
fn directional_fd(f: impl Fn(f32) -> f64, eps: f32) -> f64 {
    let c = |e: f32| (f(e) - f(-e)) / (2.0 * e as f64);
    (4.0 * c(eps / 2.0) - c(eps)) / 3.0
}

fn dot(grads: &[(Tensor, Tensor)], dir: &[(Tensor, Tensor)]) -> f64 {
    grads
        .iter()
        .zip(dir)
        .map(|((gk, gv), (dk, dv))| {
            let a: f64 = gk.data().iter().zip(dk.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            let b: f64 = gv.data().iter().zip(dv.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            a + b
        })
        .sum()
}

fn texts(corpus: &Corpus, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    (0..n as u64).map(|i| corpus.sample(Split::Train, len, seed, i).unwrap()).collect()
}

#[test]
fn tuning_loss_gradient_matches_finite_differences() {
    let cfg = config();
    let m = model(cfg, 1);
    let corpus = Corpus::bundled();
    let prefix = m.extract_prefix_cache(&[256, 10, 32]).unwrap().cache;
    let seqs = texts(&corpus, 2, 24, 5);
    let at = tuning_loss(&m, &prefix, &seqs, None, 0.0).unwrap();
    for seed in 0..3 {
        let dir = probe_direction(&at.grads, &prefix, seed);
        let fd = directional_fd(
            |e| tuning_loss(&m, &perturbed(&prefix, &dir, e, &cfg), &seqs, None, 0.0).unwrap().loss,
            2e-2,
        );
        let an = dot(&at.grads, &dir);
        let rel = (fd - an).abs() / an.abs().max(1e-6);
        assert!(rel < 1e-3, "fd {fd} analytic {an} rel {rel}");
    }
}

#[test]
fn straight_through_gradient_matches_linearized_finite_differences() {
    let cfg = config();
    let m = model(cfg, 2);
    let corpus = Corpus::bundled();
    let init = m.extract_prefix_cache(&[256, 10]).unwrap();
    // Ranges from other texts so some content activations are clamped.
    let stats = calibrate(&m, &texts(&corpus, 2, 24, 77), Some(&init.cache)).unwrap();
    let spec = QuantSpec::per_tensor_static(4);
    let seq = texts(&corpus, 1, 24, 9);
    let lambda = 0.5;
    let rec = LinearizedQuantizer::recording(FakeQuantizer::new(spec, Some(stats)).unwrap());
    let at = tuning_loss(&m, &init.cache, &seq, Some(&rec), lambda).unwrap();
    assert!(at.lq > 0.0);
    let lin = rec.freeze();
    let again = tuning_loss(&m, &init.cache, &seq, Some(&lin), lambda).unwrap();
    assert!((again.loss - at.loss).abs() < 1e-5 * at.loss.abs());
    for seed in 0..3 {
        let dir = probe_direction(&at.grads, &init.cache, 10 + seed);
        let fd = directional_fd(
            |e| tuning_loss(&m, &perturbed(&init.cache, &dir, e, &cfg), &seq, Some(&lin), lambda).unwrap().loss,
            2e-2,
        );
        let an = dot(&at.grads, &dir);
        let rel = (fd - an).abs() / an.abs().max(1e-6);
        assert!(rel < 1e-2, "fd {fd} analytic {an} rel {rel}");
    }
}

#[test]
fn zero_lambda_is_plain_prefix_loss() {
    let cfg = config();
    let m = model(cfg, 3);
    let corpus = Corpus::bundled();
    let prefix = m.extract_prefix_cache(&[256]).unwrap().cache;
    let seqs = texts(&corpus, 2, 20, 1);
    let q = FakeQuantizer::dynamic(QuantSpec::per_tensor_dynamic(8)).unwrap();
    let plain = tuning_loss(&m, &prefix, &seqs, None, 0.0).unwrap();
    let zero = tuning_loss(&m, &prefix, &seqs, Some(&q), 0.0).unwrap();
    assert!(zero.lq > 0.0);
    assert!((zero.loss - zero.pred).abs() < 1e-9);
    // Prediction loss on the literal sequence, computed outside the tuner.
    let direct: f64 = seqs
        .iter()
        .map(|s| {
            let (sum, n) = m.nll(s, Some(&prefix), None).unwrap();
            sum / n as f64
        })
        .sum::<f64>()
        / seqs.len() as f64;
    assert!((plain.loss - direct).abs() < 1e-4 * direct, "{} vs {direct}", plain.loss);
}

#[test]
fn wide_grid_quant_term_is_negligible() {
    let cfg = config();
    let m = model(cfg, 4);
    let corpus = Corpus::bundled();
    let prefix = m.extract_prefix_cache(&[256, 10]).unwrap().cache;
    let seqs = texts(&corpus, 2, 20, 2);
    let q = FakeQuantizer::dynamic(QuantSpec::per_tensor_dynamic(16)).unwrap();
    let l = tuning_loss(&m, &prefix, &seqs, Some(&q), 0.01).unwrap();
    assert!(0.01 * l.lq < 0.01 * l.pred);
}

#[test]
fn tune_changes_only_the_prefix_and_is_deterministic() {
    let cfg = config();
    let m = model(cfg, 5);
    let corpus = Corpus::bundled();
    let init = m.extract_prefix_cache(&[256, 10]).unwrap();
    let stats = calibrate(&m, &texts(&corpus, 4, 32, 3), Some(&init.cache)).unwrap();
    let tc = TuneConfig {
        epochs: 2,
        batch_size: 2,
        seq_len: 32,
        num_sequences: 8,
        lr: 1e-2,
        ..TuneConfig::default()
    };
    let before = m.checksum();
    let (a, log_a) = tune(&m, &corpus, &init, &tc, Some(&stats)).unwrap();
    let (b, log_b) = tune(&m, &corpus, &init, &tc, Some(&stats)).unwrap();
    assert_eq!(m.checksum(), before);
    assert_eq!(a, b);
    assert_eq!(log_a.clone().without_timing(), log_b.without_timing());
    assert_eq!(a.provenance, Provenance::Tuned);
    assert_eq!(a.prompt, init.prompt);
    assert_eq!(log_a.losses.len(), 8);
    assert!(log_a.losses.iter().all(|l| l.is_finite()));
    assert!(log_a.diverged.is_none());
    assert_ne!(a.cache, init.cache);
}

#[test]
fn tune_requires_calibration_for_static_ranges() {
    let cfg = config();
    let m = model(cfg, 6);
    let init = m.extract_prefix_cache(&[256]).unwrap();
    let tc = TuneConfig {
        seq_len: 32,
        ..TuneConfig::default()
    };
    let r = tune(&m, &Corpus::bundled(), &init, &tc, None);
    assert!(matches!(r, Err(Error::CalibrationMissing(_))));
}

#[test]
fn random_prefix_shape_and_determinism() {
    let cfg = config();
    let m = model(cfg, 7);
    let reference = Corpus::bundled().sample(Split::Train, 48, 0, 0).unwrap();
    let a = random_init_prefix(&m, 5, 3, &reference).unwrap();
    let b = random_init_prefix(&m, 5, 3, &reference).unwrap();
    let c = random_init_prefix(&m, 5, 4, &reference).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.provenance, Provenance::RandomInit);
    let greedy = m.extract_prefix_cache(&[1, 2, 3, 4, 5]).unwrap();
    for ((ka, va), (kg, vg)) in a.cache.layers().iter().zip(greedy.cache.layers()) {
        assert_eq!(ka.shape(), kg.shape());
        assert_eq!(va.shape(), vg.shape());
    }
    assert!(random_init_prefix(&m, 0, 3, &reference).is_err());
}

// ---- search ----

fn search_cfg() -> SearchConfig {
    SearchConfig {
        max_len: 5,
        text_len: 24,
        batch_size: 40,
        seed: 3,
        ..SearchConfig::default()
    }
}

#[test]
fn batched_scores_equal_naive_loop() {
    let cfg = config();
    let m = model(cfg, 8);
    let text = Corpus::bundled().sample(Split::Train, 24, 0, 0).unwrap();
    let spec = QuantSpec::per_tensor_dynamic(8);
    let scorer = Scorer {
        model: &m,
        spec: &spec,
        stats: None,
    };
    let prompt = [256u32, 10];
    let cands: Vec<u32> = (0..VOCAB_SIZE as u32).collect();
    let batched = scorer.score_candidates(&text, &prompt, &cands, 37).unwrap();
    let single = scorer.score_candidates(&text, &prompt, &cands, 1).unwrap();
    assert_eq!(batched, single);
    for &c in &[0u32, 65, 200, 256] {
        // Literal prompt ∥ c ∥ text with the prompt rows masked out of the measurement.
        let mut full = prompt.to_vec();
        full.push(c);
        let start = full.len();
        full.extend(&text);
        let mut opts = ForwardOptions::default().with_capture(Capture::TAPS);
        opts.content_start = start;
        let out = m.forward(&full, &opts).unwrap();
        let naive = conditional_quant_error(&out.taps, &spec, None).unwrap().total;
        let s = batched[c as usize];
        assert!((naive - s).abs() <= 1e-3 * naive, "candidate {c}: {naive} vs {s}");
    }
    let dup = scorer.score_candidates(&text, &prompt, &[7, 7, 7], 2).unwrap();
    assert_eq!(dup[0], dup[1]);
    assert_eq!(dup[1], dup[2]);
}

#[test]
fn tau_boundaries() {
    let cfg = config();
    let m = model(cfg, 9);
    let corpus = Corpus::bundled();
    let never = SearchConfig {
        tau: 1e-12,
        ..search_cfg()
    };
    let t = greedy_search(&m, &corpus, &never, None).unwrap();
    assert_eq!(t.prompt, vec![256, 10]);
    assert_eq!(t.stop_reason, StopReason::Threshold);
    assert_eq!(t.steps.len(), 1);

    let always = SearchConfig {
        tau: 1e9,
        ..search_cfg()
    };
    let t = greedy_search(&m, &corpus, &always, None).unwrap();
    assert_eq!(t.prompt.len(), 5);
    assert_eq!(t.stop_reason, StopReason::MaxLength);
    assert!(t.steps.iter().all(|s| s.accepted));
}

#[test]
fn trace_respects_acceptance_rule_and_is_deterministic() {
    let cfg = config();
    let m = model(cfg, 10);
    let corpus = Corpus::bundled();
    let c = SearchConfig {
        tau: 0.999,
        ..search_cfg()
    };
    let a = greedy_search(&m, &corpus, &c, None).unwrap();
    let b = greedy_search(&m, &corpus, &c, None).unwrap();
    assert_eq!(a.prompt, b.prompt);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!((x.chosen, x.lq_before, x.lq_after, x.accepted), (y.chosen, y.lq_before, y.lq_after, y.accepted));
    }
    assert!(a.prompt.len() <= c.max_len);
    for s in &a.steps {
        assert_eq!(s.accepted, s.lq_after < c.tau * s.lq_before);
        if s.accepted {
            assert!(s.lq_after < s.lq_before);
        }
    }
    let accepted: Vec<u32> = a.steps.iter().filter(|s| s.accepted).map(|s| s.chosen).collect();
    assert_eq!(&a.prompt[2..], accepted.as_slice());
}

#[test]
fn search_edge_cases() {
    let cfg = config();
    let m = model(cfg, 11);
    let corpus = Corpus::bundled();
    let zero = SearchConfig {
        max_len: 2,
        ..search_cfg()
    };
    let t = greedy_search(&m, &corpus, &zero, None).unwrap();
    assert_eq!(t.prompt, vec![256, 10]);
    assert!(t.steps.is_empty());
    let empty_seeds = SearchConfig {
        seeds: vec![],
        max_len: 1,
        tau: 1e9,
        ..search_cfg()
    };
    let t = greedy_search(&m, &corpus, &empty_seeds, None).unwrap();
    assert_eq!(t.prompt.len(), 1);
    let bad = SearchConfig {
        seeds: vec!["eos".into()],
        ..search_cfg()
    };
    assert!(matches!(greedy_search(&m, &corpus, &bad, None), Err(Error::Config(_))));
    let over = SearchConfig {
        max_len: 1,
        ..search_cfg()
    };
    assert!(matches!(greedy_search(&m, &corpus, &over, None), Err(Error::Config(_))));
}
