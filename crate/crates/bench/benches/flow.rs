use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use semclone_bench::{gaussian_rows, random_model};
use semclone_core::flow::{nll_and_grads, train, TrainConfig};
use semclone_core::traces::{Preprocessing, Prepared};

fn passes(c: &mut Criterion) {
    let mut g = c.benchmark_group("flow");
    for d in [2, 5] {
        let m = random_model("bench", d, 1);
        let x = gaussian_rows(256, d, 2);
        g.bench_with_input(BenchmarkId::new("forward_256", d), &x, |b, x| {
            b.iter(|| m.forward(x.view()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("inverse_256", d), &x, |b, x| {
            b.iter(|| m.inverse(x.view()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("nll_and_grads_256", d), &x, |b, x| {
            b.iter(|| nll_and_grads(&m, x.view()))
        });
    }
    g.finish();
}

fn training_epoch(c: &mut Criterion) {
    let data = gaussian_rows(1100, 2, 3);
    let columns = Preprocessing::identity(2)
        .columns
        .into_iter()
        .map(|c| c.dim)
        .collect();
    let prepared = Prepared::from_standardized(
        "bench",
        columns,
        data.slice(ndarray::s![100.., ..]).to_owned(),
        data.slice(ndarray::s![..100, ..]).to_owned(),
    );
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("epoch_1000_rows", |b| b.iter(|| train(&prepared, &cfg, 1).unwrap()));
    g.finish();
}

criterion_group!(benches, passes, training_epoch);
criterion_main!(benches);
