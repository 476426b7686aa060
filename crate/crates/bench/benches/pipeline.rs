use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use koopreach::experiment::{duffing_config, generate_data};
use koopreach::koopman::fit_global;
use koopreach::reach::brs_global;
use koopreach_bench::duffing_model;

fn duffing(c: &mut Criterion) {
    let cfg = duffing_config();
    let data = generate_data(&cfg).unwrap();
    c.bench_function("duffing fit_global", |b| {
        b.iter(|| fit_global(black_box(&data.train), &cfg.lifting).unwrap())
    });

    let model = duffing_model();
    let spec = cfg.system.spec();
    let target = spec.target.to_polytope();
    let s_x = spec.state_domain.to_polytope();
    let s_u = spec.input_set.to_polytope();
    let mut group = c.benchmark_group("duffing brs");
    group.sample_size(10);
    group.bench_function("global K=10", |b| {
        b.iter(|| brs_global(black_box(&model), &target, &s_x, &s_u, 10).unwrap())
    });
    group.finish();
}

criterion_group!(benches, duffing);
criterion_main!(benches);
