use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use xtune_bench::{default_controller, random_box_qp};
use xtune_core::nmpc::{qp_solve, QpSettings};

fn qp(c: &mut Criterion) {
    for n in [20, 60] {
        let p = random_box_qp(n, 7);
        c.bench_function(&format!("qp_box_{n}"), |b| {
            b.iter(|| qp_solve(black_box(&p), &QpSettings::default(), &[]).unwrap())
        });
    }
}

fn nmpc(c: &mut Criterion) {
    let (ctrl, path, x, u) = default_controller();
    c.bench_function("nmpc_cold_step", |b| {
        b.iter_batched(
            || ctrl.clone(),
            |mut ctrl| ctrl.step(black_box(&x), &u, &path).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let mut warm = ctrl.clone();
    warm.step(&x, &u, &path).unwrap();
    c.bench_function("nmpc_warm_step", |b| {
        b.iter_batched(
            || warm.clone(),
            |mut ctrl| ctrl.step(black_box(&x), &u, &path).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, qp, nmpc);
criterion_main!(benches);
