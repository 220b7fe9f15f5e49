use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use semclone_bench::random_model;
use semclone_core::conditioning::{condition, ConditionSettings, ConditionSpec};
use semclone_core::detector::{evaluate_link, model_matchings, pool, Pooling};

fn conditioning(c: &mut Criterion) {
    let m = random_model("bench", 4, 1);
    let spec = ConditionSpec::new(
        vec![0, 3],
        Array2::from_elem((100, 2), 0.5),
        ConditionSettings::default(),
        4,
    )
    .unwrap();
    let mut g = c.benchmark_group("conditioning");
    g.sample_size(10);
    g.bench_function("100_particles_2_of_4", |b| b.iter(|| condition(&m, &spec, 3).unwrap()));
    g.finish();
}

fn links(c: &mut Criterion) {
    let a = random_model("a", 3, 2);
    let b = random_model("b", 4, 3);
    let k = model_matchings(&a, &b, 64).remove(0);
    let settings = ConditionSettings::default();
    let mut g = c.benchmark_group("link");
    g.sample_size(10);
    g.bench_function("partial_cover_100_particles", |bch| {
        bch.iter(|| evaluate_link(&a, &b, &k, 100, &settings, 4).unwrap())
    });
    g.bench_function("full_cover_100_particles", |bch| {
        bch.iter(|| evaluate_link(&b, &a, &k.swapped(), 100, &settings, 4).unwrap())
    });
    g.finish();
    c.bench_function("pool_decision", |bch| {
        bch.iter(|| pool(std::hint::black_box(-1.0), -2.0, Pooling::Soft, 0.01))
    });
}

criterion_group!(benches, conditioning, links);
criterion_main!(benches);
