//! Cost of one objective and gradient evaluation on the study models.

use std::hint::black_box;

use clssem::{generate, study, Objective, SimSpec, Study};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("value_and_gradient");
    for (which, n) in [
        (Study::Regression, 500),
        (Study::Democracy, 100),
        (Study::Ganzach, 100),
        (Study::Muthen, 500),
    ] {
        let model = study::model(which);
        let data = generate(&SimSpec::new(which, n, 1)).unwrap().data;
        let bound = data.bind(&model).unwrap();
        let obj = Objective::new(&model, &bound, vec![1.0; model.n_equations()]).unwrap();
        let u: Vec<f64> = (0..obj.layout().len())
            .map(|k| 0.1 + 0.01 * (k % 17) as f64)
            .collect();
        group.bench_with_input(BenchmarkId::new(which.name(), n), &u, |b, u| {
            b.iter(|| obj.value_and_gradient(black_box(u)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, objective);
criterion_main!(benches);
