use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forgetbench::corpus::{generate_corpus, CorpusSpec};
use forgetbench::lm::train::{batch_nll_grad, train};
use forgetbench::lm::{LmConfig, OptimizerConfig};
use forgetbench::mrd::{mrd_monte_carlo, rank_by_mrd, EstimatorConfig, MonteCarloConfig};
use forgetbench::ExecMode;

fn bench(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusSpec { per_cell: 4, heldout: 4, ..CorpusSpec::default() }, 0).unwrap();
    let cfg = LmConfig { vocab_size: corpus.vocab.size(), embed_dim: 32, ..LmConfig::default() };
    let (model, _) = train(&corpus, cfg, &OptimizerConfig { epochs: 2, ..OptimizerConfig::default() }).unwrap();
    let sample = &corpus.forget[0].tokens;
    let batch: Vec<&[u32]> = corpus.training_samples().take(8).map(|s| s.tokens.as_slice()).collect();
    let estimator = EstimatorConfig::MonteCarlo(MonteCarloConfig { k: 16, ..MonteCarloConfig::default() });
    let mc = MonteCarloConfig { k: 64, ..MonteCarloConfig::default() };

    let mut group = c.benchmark_group("exec_mode");
    group.sample_size(10);
    for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
        group.bench_with_input(BenchmarkId::new("monte_carlo_k64", name), &mode, |b, &mode| {
            b.iter(|| mrd_monte_carlo(&model, sample, &mc, 1, mode).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rank_forget_split", name), &mode, |b, &mode| {
            b.iter(|| rank_by_mrd(&model, &corpus.forget, &estimator, 1, mode).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("batch_gradient", name), &mode, |b, &mode| {
            b.iter(|| batch_nll_grad(&model, &batch, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
