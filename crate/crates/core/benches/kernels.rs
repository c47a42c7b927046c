//! Score kernels (naive vs efficient) and a training-batch loss, each on the
//! rayon path and the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dalm::attention::{scores_efficient, scores_naive, AttentionParams, ScoreTerms};
use dalm::config::{ModelConfig, Objective};
use dalm::data::{batch, CorruptionConfig};
use dalm::model::Model;
use dalm::par;
use dalm::relpos::{DeltaMatrix, RelPosTable};
use dalm::tensor::Tensor;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn bench_scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("scores");
    let (d, k, heads) = (64, 16, 4);
    for n in [32usize, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let h = randn(&mut rng, &[n, d]);
        let table = RelPosTable::new(k, randn(&mut rng, &[2 * k, d])).unwrap();
        let p = AttentionParams::random(d, heads, ScoreTerms::FULL, false, 0.1, &mut rng);
        let dm = DeltaMatrix::new(n, k).unwrap();
        group.bench_with_input(BenchmarkId::new("efficient", n), &n, |b, _| {
            b.iter(|| scores_efficient(&h, &p, &table, &dm).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| scores_naive(&h, &p, &table, &dm).unwrap())
        });
    }
    group.finish();
}

fn bench_batch_loss(c: &mut Criterion) {
    let cfg = ModelConfig {
        vocab_size: 300,
        dropout: 0.0,
        attention_dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seqs: Vec<Vec<u32>> = (0..16)
        .map(|_| (0..30).map(|_| rng.random_range(5..300)).collect())
        .collect();
    let b = batch(&seqs, 32, 300, &mut rng, &CorruptionConfig::default()).unwrap();

    let mut group = c.benchmark_group("batch_loss_with_grads");
    group.sample_size(10);
    for (label, sequential) in [("parallel", false), ("sequential", true)] {
        group.bench_function(label, |bench| {
            par::set_sequential(sequential);
            bench.iter(|| {
                model
                    .batch_loss(&b, Objective::Mlm, None, None, true)
                    .unwrap()
            });
            par::set_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scores, bench_batch_loss);
criterion_main!(benches);
