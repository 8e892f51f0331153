//! Sequential vs rayon execution of the three lattice-wide computations.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use atachic::kernels::{kernel_residual_with, solve_direct_kernels, KernelOptions};
use atachic::model::{validate_config, PlantConfig};
use atachic::transforms::invert_kernels_with;
use atachic::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let cfg = validate_config(PlantConfig::two_state_example()).unwrap();
    let m = 120;
    let ks = solve_direct_kernels(&cfg, &KernelOptions::new(m)).unwrap();

    let mut g = c.benchmark_group("kernel_solve");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, m), &exec, |b, &exec| {
            let opts = KernelOptions { exec, ..KernelOptions::new(m) };
            b.iter(|| solve_direct_kernels(&cfg, &opts).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("invert_kernels");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, m), &exec, |b, &exec| {
            b.iter(|| invert_kernels_with(&ks, &cfg, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("kernel_residual");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, m), &exec, |b, &exec| {
            b.iter(|| kernel_residual_with(&ks, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
