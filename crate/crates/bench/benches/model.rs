use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use orbpred::datagen::build_record;
use orbpred::features::featurize;
use orbpred::losses::LossWeights;
use orbpred::model::{forward, init_params, model_gradients, ModelConfig, Sample};
use orbpred::pipeline::prepare_record;
use orbpred_bench::cluster;

fn network(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for n in [4, 8, 12] {
        let (geom, matching) = cluster(n, 23);
        group.bench_function(BenchmarkId::new("featurize", n), |b| {
            b.iter(|| featurize(black_box(&geom), &matching, &cfg.feature_config()).unwrap())
        });
        let fg = featurize(&geom, &matching, &cfg.feature_config()).unwrap();
        group.bench_function(BenchmarkId::new("forward", n), |b| {
            b.iter(|| forward(&params, &cfg, black_box(&fg)).unwrap())
        });
    }
    for n in [4, 6] {
        let (geom, _) = cluster(n, 23);
        let record = build_record(geom).unwrap();
        let prepared = prepare_record(&record, &cfg).unwrap();
        let sample = Sample {
            id: 0,
            features: &prepared.features,
            a_ref: &prepared.a_ref,
            m_ref: &prepared.m_ref,
            selector: &prepared.selector,
        };
        group.bench_function(BenchmarkId::new("gradients", n), |b| {
            b.iter(|| model_gradients(&params, &cfg, black_box(&[sample]), &LossWeights::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, network);
criterion_main!(benches);
