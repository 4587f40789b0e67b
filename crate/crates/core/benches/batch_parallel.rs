use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cavl_core::data::{generate_synthetic_corpus, make_batch, BatchConfig, GeneratorSpec};
use cavl_core::exec::Exec;
use cavl_core::model::ModelConfig;
use cavl_core::objectives::{ContrastiveSpec, LossWeights};
use cavl_core::rng::{domain, stream};
use cavl_core::training::{batch_gradients, init_model};

fn batch_gradient(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let spec = GeneratorSpec {
        n_train: 64,
        n_test: 2,
        ..GeneratorSpec::default()
    };
    let corpus = generate_synthetic_corpus(1, &spec, &cfg).unwrap();
    let model = init_model(&cfg, 1).unwrap();
    let weights = LossWeights::default();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for b in [8usize, 32] {
        let anchors: Vec<usize> = (0..b).collect();
        let batch = make_batch(
            &corpus.train,
            &anchors,
            cfg.vocab_size,
            &mut stream(1, domain::BATCH, 0),
            &BatchConfig::default(),
        )
        .unwrap();
        for (label, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, b), &batch, |bench, batch| {
                bench.iter(|| batch_gradients(&model, batch, &weights, ContrastiveSpec::default(), exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_gradient);
criterion_main!(benches);
