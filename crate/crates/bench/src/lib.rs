//! Criterion groups for the TaLK core, its baselines, the table build and
//! the kernel backward pass. Wired up by `benches/cores.rs`.

use criterion::{black_box, BenchmarkId, Criterion, Throughput};

use talk_core::baselines::{BenchCoreKind, PreparedCore};
use talk_core::scan::sat_build_two_pass;
use talk_core::{sat_build_sequential, talk_backward, talk_forward, RelativeOffsets, Rng, TalkConfig, Tensor};

const BATCH: usize = 2;
const DIM: usize = 256;
const HEADS: usize = 8;

pub fn input(n: usize, dim: usize, rng: &mut Rng) -> Tensor<f32> {
    Tensor::rand_uniform(&[BATCH, n, dim], -1.0, 1.0, rng).expect("valid shape")
}

pub fn cores(c: &mut Criterion) {
    let mut group = c.benchmark_group("core_forward");
    group.sample_size(10);
    let mut rng = Rng::new(0);
    for n in [128, 1024, 4096] {
        let x = input(n, DIM, &mut rng);
        group.throughput(Throughput::Elements((BATCH * n) as u64));
        for kind in [BenchCoreKind::TalkConv, BenchCoreKind::DynamicConv(31), BenchCoreKind::SelfAttention] {
            let core = PreparedCore::<f32>::new(kind, DIM, HEADS, &mut rng).expect("valid core");
            group.bench_with_input(BenchmarkId::new(kind.to_string(), n), &x, |b, x| {
                b.iter(|| core.run(black_box(x), 1).expect("fits in memory"))
            });
        }
    }
    group.finish();
}

pub fn reach(c: &mut Criterion) {
    let mut group = c.benchmark_group("talk_reach");
    group.sample_size(20);
    let mut rng = Rng::new(1);
    let x = input(4096, DIM, &mut rng);
    for r in [3, 15, 63, 255] {
        let core = PreparedCore::<f32>::with_reach(BenchCoreKind::TalkConv, DIM, HEADS, r, &mut rng).expect("valid core");
        group.bench_with_input(BenchmarkId::from_parameter(r), &x, |b, x| b.iter(|| core.run(black_box(x), 1).unwrap()));
    }
    group.finish();
}

pub fn table(c: &mut Criterion) {
    let mut group = c.benchmark_group("sat_build");
    let mut rng = Rng::new(2);
    for n in [1024, 8192] {
        let x = input(n, DIM, &mut rng);
        group.throughput(Throughput::Elements((BATCH * n * DIM) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &x, |b, x| {
            b.iter(|| sat_build_sequential(black_box(x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("two_pass", n), &x, |b, x| {
            b.iter(|| sat_build_two_pass(black_box(x), 1).unwrap())
        });
    }
    group.finish();
}

pub fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("talk_backward");
    let mut rng = Rng::new(3);
    let cfg = TalkConfig {
        dim: DIM,
        heads: HEADS,
        left_max: 15,
        right_max: 15,
        offsets_dropout: 0.0,
        normalize: true,
    };
    for n in [1024, 4096] {
        let x = input(n, DIM, &mut rng);
        let rel = RelativeOffsets::new(Tensor::rand_uniform(&[BATCH, n, HEADS, 2], 0.0, 1.0, &mut rng).unwrap()).unwrap();
        let (out, saved) = talk_forward(&x, &rel, &cfg).unwrap();
        group.throughput(Throughput::Elements((BATCH * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &out, |b, g| {
            b.iter(|| talk_backward(black_box(g), &saved).unwrap())
        });
    }
    group.finish();
}
