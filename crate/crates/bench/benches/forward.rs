use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cst_bench::{attention_fixture, forward_fixture};
use cst_core::model::CstConfig;
use cst_core::sah_msa::{multi_round_attention, RoundWeighting};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("micro_forward_32");
    group.sample_size(20);
    for sigma in [0.0, 0.5, 0.75] {
        let f = forward_fixture(
            CstConfig {
                sigma,
                ..CstConfig::micro()
            },
            32,
            0,
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(sigma), &f, |b, f| {
            b.iter(|| {
                f.model
                    .reconstruct(&f.store, black_box(&f.measurement), &f.aperture)
                    .unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("bucket_attention_256x32");
    for m in [16, 64, 256] {
        let f = attention_fixture(256, 32, 4, m, 2).unwrap();
        group.bench_with_input(BenchmarkId::new("bucket", m), &f, |b, f| {
            b.iter(|| {
                multi_round_attention(black_box(&f.tokens), &f.rounds, &f.weights, RoundWeighting::Normalized).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, attention);
criterion_main!(benches);
