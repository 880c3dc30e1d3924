use std::collections::BTreeMap;
use std::hint::black_box;

use avaloop_bench::prepare;
use avaloop_core::avalanche::{decide_loop, hash_loop_filter, run_trials};
use avaloop_core::{analyze, detect_loops, partition_blocks, replay, shapiro_wilk, AnalysisConfig, AvalancheConfig};
use criterion::{criterion_group, criterion_main, Criterion};

fn stages(c: &mut Criterion) {
    let xtea = prepare("xtea");
    let outputs: Vec<u32> = xtea.io.outputs.iter().copied().collect();
    c.bench_function("partition_and_detect/xtea", |b| {
        b.iter(|| detect_loops(&partition_blocks(black_box(&xtea.run.trace))))
    });
    c.bench_function("replay/xtea", |b| {
        b.iter(|| replay(&xtea.snap, &BTreeMap::new(), &outputs, xtea.snap.default_max_steps()))
    });
    let cfg = AvalancheConfig::default();
    let matrix = run_trials(&xtea.snap, &xtea.io, cfg.n_trials, 1, xtea.snap.default_max_steps());
    let hf = hash_loop_filter(&xtea.lp, &xtea.run.trace, cfg.hash_filter_threshold);
    c.bench_function("decide_loop/xtea", |b| b.iter(|| decide_loop(0, black_box(&matrix), &cfg, hf)));
    let samples: Vec<f64> = (0..30).map(|i| f64::from((i * 7919) % 31)).collect();
    c.bench_function("shapiro_wilk/30", |b| b.iter(|| shapiro_wilk(black_box(&samples))));
}

fn end_to_end(c: &mut Criterion) {
    let mut g = c.benchmark_group("analyze");
    g.sample_size(10);
    for program in ["xtea", "aes", "matmul"] {
        let p = prepare(program);
        let config = AnalysisConfig::default();
        g.bench_function(program, |b| b.iter(|| analyze(&p.run.trace, &config)));
    }
    g.finish();
}

criterion_group!(benches, stages, end_to_end);
criterion_main!(benches);
