use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cmcl::harness::cmd_gradcheck;
use cmcl::trainer::{stage_a_step, stage_b_step, stage_c_step};
use cmcl_bench::stage_fixture;

fn stages(c: &mut Criterion) {
    let (cfg, state, batches) = stage_fixture(400);
    let mut group = c.benchmark_group("stage_step");
    group.bench_function("A", |b| {
        let mut s = state.clone();
        b.iter(|| black_box(stage_a_step(&mut s, &batches, &cfg).unwrap()))
    });
    group.bench_function("B", |b| {
        let mut s = state.clone();
        b.iter(|| black_box(stage_b_step(&mut s, &batches).unwrap()))
    });
    group.bench_function("C", |b| {
        let mut s = state.clone();
        b.iter(|| black_box(stage_c_step(&mut s, &batches).unwrap()))
    });
    group.finish();
}

fn gradcheck_suite(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    group.bench_function("full_suite", |b| b.iter(|| black_box(cmd_gradcheck(0, None).unwrap())));
    group.finish();
}

criterion_group!(benches, stages, gradcheck_suite);
criterion_main!(benches);
