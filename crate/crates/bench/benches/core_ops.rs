//! Micro-benchmarks for the hot paths: dense math, packing, the serial
//! forward pass, and a full pipelined runtime submit/wait cycle.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tandem::engine::{initialize, RuntimeConfig};
use tandem::model::{build_model, random_batch, serial_forward};
use tandem::packing::{pack, unpack};
use tandem::tensor::{matmul, Tensor};
use tandem_bench::bench_model;

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[16usize, 32, 64] {
        let a = rand_tensor(vec![n, n], 1);
        let b = rand_tensor(vec![n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(&a, &b).unwrap());
        });
    }
    group.finish();
}

fn bench_pack_unpack(c: &mut Criterion) {
    let x = rand_tensor(vec![8, 64, 32], 3);
    let lens: Vec<usize> = (0..8).map(|i| 8 + i * 7).collect();
    c.bench_function("pack_unpack_8x64x32", |b| {
        b.iter(|| {
            let p = pack(&x, &lens).unwrap();
            unpack(&p).unwrap()
        });
    });
}

fn bench_serial_forward(c: &mut Criterion) {
    let cfg = bench_model(5);
    let params = build_model(&cfg).unwrap();
    let batch = random_batch(&cfg, 0, 4, 32, 11);
    c.bench_function("serial_forward_b4_s32", |b| {
        b.iter(|| serial_forward(&cfg, &params, &batch).unwrap());
    });
}

fn bench_pipeline_runtime(c: &mut Criterion) {
    let cfg = bench_model(7);
    let rt = initialize(RuntimeConfig::new(cfg.clone(), 1, 2)).unwrap();
    let batch = random_batch(&cfg, 0, 2, 16, 13);
    c.bench_function("pipeline_pp2_submit_wait", |b| {
        b.iter(|| {
            rt.submit(batch.clone()).unwrap().wait().unwrap();
        });
    });
    rt.shutdown();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_pack_unpack,
    bench_serial_forward,
    bench_pipeline_runtime
);
criterion_main!(benches);
