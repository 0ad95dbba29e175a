use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sortpipe_core::calib::{rejection_sweep, DEFAULT_THRESHOLDS};
use sortpipe_core::hw::{pareto_sweep, DeviceBudget};
use sortpipe_core::quant::{agreement_rate, QuantPlan};
use sortpipe_core::synth::{balanced_weights, random_images, random_log};
use sortpipe_core::{Exec, ModelConfig};

const PATHS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn agreement(c: &mut Criterion) {
    let cfg = ModelConfig::reference();
    let w = balanced_weights(&cfg, 7).unwrap();
    let plan = QuantPlan::reference(&cfg);
    let images = random_images(cfg.input_shape, 64, 1);
    let mut g = c.benchmark_group("agreement_rate_64");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| agreement_rate(&cfg, &w, &plan, black_box(&images), exec).unwrap())
        });
    }
    g.finish();
}

fn pareto(c: &mut Criterion) {
    let cfg = ModelConfig::reference();
    let plan = QuantPlan::reference(&cfg);
    let dev = DeviceBudget::ku035();
    let reuse: Vec<usize> = (1..=512).collect();
    let mut g = c.benchmark_group("pareto_sweep_512");
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pareto_sweep(&cfg, &plan, black_box(&reuse), 250.0, &dev, exec).unwrap())
        });
    }
    g.finish();
}

fn rejection(c: &mut Criterion) {
    let log = random_log(100_000, 2, true, 3).unwrap();
    let thresholds: Vec<f64> = (0..50).map(|i| 0.5 + i as f64 / 100.0).chain(DEFAULT_THRESHOLDS).collect();
    let mut g = c.benchmark_group("rejection_sweep_100k");
    g.sample_size(10);
    for (name, exec) in PATHS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rejection_sweep(black_box(&log), &thresholds, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, agreement, pareto, rejection);
criterion_main!(benches);
