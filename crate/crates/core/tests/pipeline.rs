use forgetbench::corpus::{generate_corpus, load_corpus, rejection_pairs, default_rejection_fixtures, save_corpus, Corpus, CorpusSpec};
use forgetbench::experiments::{self, ExperimentConfig, Output};
use forgetbench::lm::train::train;
use forgetbench::lm::{graph, load_checkpoint, save_checkpoint, token_log_probs, LanguageModel, LmConfig, OptimizerConfig};
use forgetbench::mrd::{self, EstimatorConfig, MonteCarloConfig};
use forgetbench::unlearn::{
    read_run_log, run_graddiff, run_po, run_sga, write_run_log, EarlyStopThresholds, Method, UnlearnConfig,
};
use forgetbench::ExecMode;

fn small_spec() -> CorpusSpec {
    CorpusSpec { per_cell: 2, heldout: 4, forget_fraction: 0.25, ..CorpusSpec::default() }
}

fn small_model_config(corpus: &Corpus) -> LmConfig {
    LmConfig { vocab_size: corpus.vocab.size(), embed_dim: 16, num_layers: 1, num_heads: 2, ..LmConfig::default() }
}

fn small_training() -> OptimizerConfig {
    OptimizerConfig { learning_rate: 3e-3, epochs: 6, ..OptimizerConfig::default() }
}

fn trained() -> (Corpus, LanguageModel) {
    let corpus = generate_corpus(&small_spec(), 3).unwrap();
    let (model, _) = train(&corpus, small_model_config(&corpus), &small_training()).unwrap();
    (corpus, model)
}

#[test]
fn tape_and_cached_decoder_agree() {
    let (corpus, model) = trained();
    for s in corpus.training_samples().take(4) {
        let (total, _) = graph::log_likelihood_grad(&model, model.params().values(), &s.tokens).unwrap();
        let lp = token_log_probs(&model, &s.tokens).unwrap();
        assert!((total - lp.sequence_total).abs() < 1e-10, "{total} vs {}", lp.sequence_total);
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let corpus = generate_corpus(&small_spec(), 3).unwrap();
    let (a, report) = train(&corpus, small_model_config(&corpus), &small_training()).unwrap();
    let (b, _) = train(&corpus, small_model_config(&corpus), &small_training()).unwrap();
    assert_eq!(a.params().values(), b.params().values());
    assert!(report.epoch_loss.last().unwrap() < report.epoch_loss.first().unwrap());
}

#[test]
fn corpus_file_reproduces_the_same_model() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small_spec(), 5).unwrap();
    save_corpus(&corpus, dir.path().join("c.jsonl")).unwrap();
    let loaded = load_corpus(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(loaded, corpus);
    let (a, _) = train(&corpus, small_model_config(&corpus), &small_training()).unwrap();
    let (b, _) = train(&loaded, small_model_config(&loaded), &small_training()).unwrap();
    save_checkpoint(&a, dir.path().join("a.ckpt")).unwrap();
    save_checkpoint(&b, dir.path().join("b.ckpt")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b.ckpt")).unwrap()
    );
    let back = load_checkpoint(dir.path().join("a.ckpt")).unwrap();
    assert_eq!(back.params().values(), a.params().values());
}

#[test]
fn estimates_do_not_depend_on_execution_mode() {
    let (corpus, model) = trained();
    let cfg = EstimatorConfig::MonteCarlo(MonteCarloConfig { k: 16, ..MonteCarloConfig::default() });
    let seq = mrd::rank_by_mrd(&model, &corpus.forget, &cfg, 9, ExecMode::Sequential).unwrap();
    let par = mrd::rank_by_mrd(&model, &corpus.forget, &cfg, 9, ExecMode::Parallel).unwrap();
    assert_eq!(seq, par);
}

fn unlearn_cfg(method: Method) -> UnlearnConfig {
    UnlearnConfig { method, learning_rate: 3e-3, max_steps: 12, ..UnlearnConfig::default() }
}

/// Bars no sample can reach, so runs always spend their full budget.
fn unreachable() -> EarlyStopThresholds {
    EarlyStopThresholds { el_bar: -1.0, ma_bar: -1.0, n_gram: 1 }
}

#[test]
fn gradient_ascent_lowers_the_forget_likelihood() {
    let (corpus, mut model) = trained();
    let x = &corpus.forget[..1];
    let before = token_log_probs(&model, &x[0].tokens).unwrap().sequence_total;
    let log = run_sga(&mut model, x, &UnlearnConfig { max_steps: 5, ..unlearn_cfg(Method::Sga) }, &unreachable()).unwrap();
    let after = token_log_probs(&model, &x[0].tokens).unwrap().sequence_total;
    assert_eq!(log.total_updates, 5);
    assert!(after < before);
    let nll: Vec<f64> = log.steps.iter().map(|s| s.forget_nll).collect();
    assert!(nll.windows(2).all(|w| w[1] > w[0]), "{nll:?}");
}

#[test]
fn retain_term_protects_retained_samples() {
    let (corpus, model) = trained();
    let retain_nll = |m: &LanguageModel| -> f64 {
        corpus.retain.iter().map(|s| -token_log_probs(m, &s.tokens).unwrap().sequence_total).sum()
    };
    let cfg = UnlearnConfig { max_steps: 30, ..unlearn_cfg(Method::Graddiff) };
    let mut plain = model.clone();
    run_sga(&mut plain, &corpus.forget, &UnlearnConfig { method: Method::Sga, ..cfg.clone() }, &unreachable()).unwrap();
    let mut guarded = model.clone();
    run_graddiff(&mut guarded, &corpus.forget, &corpus.retain, &UnlearnConfig { retain_weight: 5.0, ..cfg }, &unreachable())
        .unwrap();
    assert!(retain_nll(&guarded) < retain_nll(&plain));
}

#[test]
fn preference_optimization_raises_the_refusal() {
    let (corpus, mut model) = trained();
    let pairs = rejection_pairs(&corpus, &default_rejection_fixtures(&corpus, 2)).unwrap();
    let score = |m: &LanguageModel| -> f64 {
        pairs
            .iter()
            .map(|p| {
                let mut seq = p.prompt.clone();
                seq.extend_from_slice(&p.target);
                graph::partial_log_likelihood_grad(m, m.params().values(), &seq, p.prompt.len() - 1).unwrap().0
            })
            .sum()
    };
    let before = score(&model);
    let cfg = UnlearnConfig { retain_weight: 0.0, max_steps: 20, ..unlearn_cfg(Method::Po) };
    run_po(&mut model, &corpus.forget, &pairs, &corpus.retain, &cfg, &unreachable()).unwrap();
    assert!(score(&model) > before);
}

#[test]
fn run_log_round_trips() {
    let (corpus, mut model) = trained();
    let th = EarlyStopThresholds::from_model(&model, &corpus.training_samples().cloned().collect::<Vec<_>>(), 1, ExecMode::best())
        .unwrap();
    let log = run_sga(&mut model, &corpus.forget, &unlearn_cfg(Method::Sga), &th).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    write_run_log(&log, &path).unwrap();
    let back = read_run_log(&path).unwrap();
    assert_eq!(back.total_updates, log.total_updates);
    assert_eq!(back.steps, log.steps);
    assert_eq!(back.samples, log.samples);
    let lines = std::fs::read_to_string(&path).unwrap();
    assert_eq!(lines.lines().count(), log.total_updates + 1);
    assert!(lines.lines().last().unwrap().contains("\"record\":\"summary\""));
}

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig::from_overrides(serde_json::json!({
        "corpus": {"per_cell": 2, "heldout": 4, "forget_fraction": 0.25},
        "model": {"embed_dim": 16, "num_layers": 1},
        "training": {"epochs": 4},
        "mrd": {"k": 8, "probes": 4},
        "unlearn": {"max_steps": 10}
    }))
    .unwrap()
}

#[test]
fn commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment();
    let out = Output::create(dir.path().join("train"), &cfg).unwrap();
    let (ws, summary) = experiments::cmd_train(&cfg, Some(&out)).unwrap();
    assert_eq!(summary.samples, ws.training_samples().len());
    for f in ["config.json", "environment.json", "model.ckpt", "corpus.jsonl", "rejections.json", "training_curve.csv", "summary.json"] {
        assert!(out.path(f).exists(), "{f} missing");
    }

    let reuse = ExperimentConfig {
        checkpoint_path: Some(out.path("model.ckpt")),
        corpus_path: Some(out.path("corpus.jsonl")),
        ..cfg.clone()
    };
    let mrd_out = Output::create(dir.path().join("mrd"), &reuse).unwrap();
    let (rows, _) = experiments::cmd_mrd(&reuse, Some(&mrd_out)).unwrap();
    assert_eq!(rows.len(), ws.corpus.forget.len());
    assert!(rows.windows(2).all(|w| w[0].monte_carlo >= w[1].monte_carlo));
    let records = mrd::read_mrd_report(mrd_out.path("mrd.jsonl")).unwrap();
    assert_eq!(records.len(), 3 * rows.len());

    let eval_out = Output::create(dir.path().join("eval"), &reuse).unwrap();
    let report = experiments::cmd_evaluate(&reuse, Some(&eval_out)).unwrap();
    assert!(report.completeness().is_some());
    let csv = std::fs::read_to_string(eval_out.path("metrics.csv")).unwrap();
    assert!(csv.starts_with("split,metric,value"));

    let u_out = Output::create(dir.path().join("unlearn"), &reuse).unwrap();
    let (log, s) = experiments::cmd_unlearn(&reuse, Some(&u_out)).unwrap();
    assert_eq!(s.total_updates, log.total_updates);
    assert_eq!(read_run_log(u_out.path("run_log.jsonl")).unwrap().total_updates, log.total_updates);
    assert!(u_out.path("unlearned.ckpt").exists());
}
