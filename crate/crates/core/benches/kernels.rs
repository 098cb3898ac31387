//! Hot kernels under the active execution mode.
//!
//! Benchmark ids do not encode the mode, so a sequential baseline can be
//! compared against the parallel build directly:
//!
//! ```text
//! cargo bench -p dcseg-core --no-default-features -- --save-baseline sequential
//! cargo bench -p dcseg-core -- --baseline sequential
//! ```

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dcseg::autograd::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use dcseg::data::{generate_phantom, PhantomSpec};
use dcseg::evaluation::{alignment_metrics, encode_representations, evaluate_all_subsets, RegionSpec};
use dcseg::networks::ModelConfig;
use dcseg::par;
use dcseg::params::Tensor;
use dcseg::training::{initial_state, train_step, TrainBatch, TrainConfig};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in [1usize, 4] {
        let g = ConvGeometry::new(8, 8, 3, 1, [16, 16, 16]);
        let x = randn(&mut rng, batch * g.cin * g.in_voxels());
        let w = randn(&mut rng, g.cout * g.patch_len());
        let b = randn(&mut rng, g.cout);
        let dy = randn(&mut rng, batch * g.cout * g.out_voxels());
        group.bench_with_input(BenchmarkId::new("forward", batch), &batch, |bench, &n| {
            bench.iter(|| conv3d_forward(black_box(&x), n, &w, &b, &g))
        });
        group.bench_with_input(BenchmarkId::new("backward", batch), &batch, |bench, &n| {
            bench.iter(|| conv3d_backward(black_box(&x), n, &w, &dy, &g, true))
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let model_cfg = ModelConfig::toy();
    let cfg = TrainConfig {
        patch_side: 16,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = TrainBatch {
        inputs: (0..4)
            .map(|_| Tensor::from_shape_vec(IxDyn(&[2, 1, 16, 16, 16]), randn(&mut rng, 2 * 4096)).unwrap())
            .collect(),
        labels: (0..2)
            .map(|_| Array3::from_shape_simple_fn((16, 16, 16), || rng.gen_range(0..4u8)))
            .collect(),
    };
    let mut state = initial_state(&model_cfg, &cfg).unwrap();
    c.bench_function("train_step/toy_b2", |bench| {
        bench.iter(|| train_step(&mut state, &batch, &cfg, 1e-3).unwrap())
    });
}

fn evaluation(c: &mut Criterion) {
    let model = dcseg::networks::DcSegModel::new(ModelConfig::toy(), 0).unwrap();
    let subjects: Vec<_> = (0..2).map(|s| generate_phantom(&PhantomSpec::default().with_seed(s)).unwrap()).collect();
    let regions = RegionSpec::brats();
    let mut group = c.benchmark_group("evaluation");
    group.bench_function("all_subsets_2x32", |bench| {
        bench.iter(|| evaluate_all_subsets(&model, &subjects, &regions).unwrap())
    });
    let records = encode_representations(&model, &subjects).unwrap();
    group.bench_function("alignment_metrics", |bench| bench.iter(|| alignment_metrics(&records).unwrap()));
    group.finish();
}

fn phantoms(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    c.bench_function("phantoms/4x32", |bench| {
        bench.iter(|| par::map_range(4, |i| generate_phantom(&spec.with_seed(i as u64)).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = conv, training_step, evaluation, phantoms
}
criterion_main!(benches);
