use criterion::{criterion_group, criterion_main, Criterion};
use rtc_core::backbone::{ArchConfig, Params};
use rtc_core::config::{Preset, RunConfig};
use rtc_core::gradcheck::micro_batch;
use rtc_core::trainer::{train_step, Phase, Sgd};

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for preset in [Preset::Baseline, Preset::Full] {
        let mut cfg = RunConfig::default();
        cfg.apply_preset(preset);
        let batch = micro_batch(&cfg.train, 4, 0).unwrap();
        let sw = cfg.switches();
        group.bench_function(preset.name(), |b| {
            let mut params = Params::init(&ArchConfig::desk(4), 0);
            let mut opt = Sgd::default();
            b.iter(|| train_step(&mut params, &mut opt, &batch, &cfg.train, &sw, Phase::Full, 1e-4).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
