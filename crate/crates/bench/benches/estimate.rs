//! End-to-end estimation time per weight strategy.

use clssem::{estimate, generate, study, EstimateConfig, SimSpec, Study, WeightStrategy};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn strategies(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimate_regression_n100");
    group.sample_size(10);
    let model = study::model(Study::Regression);
    let data = generate(&SimSpec::new(Study::Regression, 100, 1))
        .unwrap()
        .data;
    for strategy in WeightStrategy::ALL {
        let cfg = EstimateConfig {
            strategy,
            check_uniqueness: false,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(strategy), &cfg, |b, cfg| {
            b.iter(|| estimate(&model, &data, cfg).unwrap())
        });
    }
    group.finish();
}

fn studies(c: &mut Criterion) {
    let mut group = c.benchmark_group("estimate_w1");
    group.sample_size(10);
    for (which, n) in [
        (Study::Democracy, 100),
        (Study::Ganzach, 100),
        (Study::Implicative, 100),
    ] {
        let model = study::model(which);
        let data = generate(&SimSpec::new(which, n, 1)).unwrap().data;
        let cfg = EstimateConfig {
            check_uniqueness: false,
            ..Default::default()
        };
        group.bench_function(which.name(), |b| {
            b.iter(|| estimate(&model, &data, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, strategies, studies);
criterion_main!(benches);
