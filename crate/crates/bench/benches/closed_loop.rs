use criterion::{criterion_group, criterion_main, Criterion};
use xtune_core::{run_closed_loop, ScenarioConfig, TunerKind};

fn one_maneuver(kind: TunerKind) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.dlc.repeats = 1;
    cfg.tuner_kind = kind;
    cfg
}

fn closed_loop(c: &mut Criterion) {
    let mut g = c.benchmark_group("closed_loop");
    g.sample_size(10);
    for kind in [TunerKind::None, TunerKind::Ukf] {
        let cfg = one_maneuver(kind);
        g.bench_function(format!("{kind:?}"), |b| {
            b.iter(|| run_closed_loop(&cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, closed_loop);
criterion_main!(benches);
