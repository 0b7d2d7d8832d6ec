// SPDX-License-Identifier: Apache-2.0

//! Single-thread versus full-pool timings for the data-parallel kernels.
//! Built without the `parallel` feature, both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sparse_pca_amp::amp::{amp_init, amp_step, AmpConfig, InitMode};
use sparse_pca_amp::model::{generate_observation, sample_signal, Instance, PriorFamily, PriorSpec};
use sparse_pca_amp::parallel::{current_threads, with_threads};
use sparse_pca_amp::phase::scan_phase_diagram;
use sparse_pca_amp::state_evolution::{se_step_monte_carlo, SeConfig, SeState};

fn pools() -> Vec<(String, Option<usize>)> {
    let full = with_threads(None, current_threads);
    vec![("serial".to_string(), Some(1)), (format!("pool-{full}"), None)]
}

fn bench_amp_step(c: &mut Criterion) {
    let prior = PriorSpec::gauss_bernoulli(0.1, 2).unwrap();
    let inst = Instance::generate(&prior, 2000, 0.01, 1).unwrap();
    let config = AmpConfig::default();
    let start = amp_init(&inst, &prior, InitMode::Informative).unwrap();
    let mut group = c.benchmark_group("amp_step_n2000_r2");
    for (label, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |b, &t| {
            with_threads(t, || {
                b.iter(|| {
                    let mut s = start.clone();
                    black_box(amp_step(&mut s, &inst, &prior, &config).unwrap())
                })
            })
        });
    }
    group.finish();
}

fn bench_observation(c: &mut Criterion) {
    let prior = PriorSpec::gauss_bernoulli(0.1, 1).unwrap();
    let x0 = sample_signal(&prior, 2000, 3).unwrap();
    let mut group = c.benchmark_group("generate_observation_n2000");
    group.sample_size(20);
    for (label, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |b, &t| {
            with_threads(t, || b.iter(|| black_box(generate_observation(&x0, 0.01, 3).unwrap())))
        });
    }
    group.finish();
}

fn bench_se_monte_carlo(c: &mut Criterion) {
    let prior = PriorSpec::gauss_bernoulli(0.1, 3).unwrap();
    let state = SeState::isotropic(0.04, 3, 0.005);
    let mut group = c.benchmark_group("se_monte_carlo_r3_1e5");
    group.sample_size(20);
    for (label, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |b, &t| {
            with_threads(t, || b.iter(|| black_box(se_step_monte_carlo(&state, &prior, 100_000, 9).unwrap())))
        });
    }
    group.finish();
}

fn bench_scan(c: &mut Criterion) {
    let deltas: Vec<f64> = (0..32).map(|k| 0.002 * 1.1f64.powi(k)).collect();
    let config = SeConfig::default();
    let mut group = c.benchmark_group("scan_delta_grid_32");
    group.sample_size(10);
    for (label, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &threads, |b, &t| {
            with_threads(t, || {
                b.iter(|| {
                    black_box(scan_phase_diagram(PriorFamily::GaussBernoulli, &[0.1], &deltas, 1, &config).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_amp_step, bench_observation, bench_se_monte_carlo, bench_scan);
criterion_main!(benches);
