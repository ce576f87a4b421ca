use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use covtune::assim::{blue_analysis, enda_cycle};
use covtune::covmat::cholesky_lower;
use covtune::dynmodels::sw_step;
use covtune::lstmnet::{backward, forward_many_to_one};
use covtune::RandomSource;
use covtune_bench::{analysis_case, ar1_matrix, lstm_case, sw_case};

fn lstm(c: &mut Criterion) {
    let mut g = c.benchmark_group("lstm");
    for (input, hidden, steps) in [(3, 16, 1001), (3, 200, 201), (50, 32, 201)] {
        let case = lstm_case(input, hidden, steps);
        let id = format!("{input}x{hidden}x{steps}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &case.seq, |b, s| {
            b.iter(|| forward_many_to_one(black_box(s), &case.params).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", &id), &case.seq, |b, s| {
            b.iter(|| backward(black_box(s), &case.target, &case.params).unwrap())
        });
    }
    g.finish();
}

fn analysis(c: &mut Criterion) {
    let a = analysis_case(100);
    c.bench_function("blue_analysis/lorenz", |bch| {
        bch.iter(|| blue_analysis(black_box(&a.xb), &a.y, &a.b, &a.r, &a.h).unwrap())
    });
    let mut rng = RandomSource::new(3);
    c.bench_function("enda_cycle/lorenz_m100", |bch| {
        bch.iter(|| enda_cycle(&a.ensemble, &a.y, &a.r, &a.h, &mut rng).unwrap())
    });
}

fn shallow_water(c: &mut Criterion) {
    let mut g = c.benchmark_group("sw_step");
    for n in [10, 20] {
        let (p, f) = sw_case(n);
        g.bench_function(format!("{n}x{n}"), |b| b.iter(|| sw_step(black_box(&f), &p).unwrap()));
    }
    g.finish();
    let m = ar1_matrix(50, 0.9);
    c.bench_function("cholesky/50", |b| b.iter(|| cholesky_lower(black_box(&m)).unwrap()));
}

criterion_group!(benches, lstm, analysis, shallow_water);
criterion_main!(benches);
