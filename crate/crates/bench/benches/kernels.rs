use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dp3d_bench::Fixture;
use dp3d_core::loss::{Arap, LossWeights};
use dp3d_core::mesh::{primitives, spectral_basis};
use dp3d_core::model::skin;
use dp3d_core::nn::MlpConfig;
use dp3d_core::optim::Gradients;
use dp3d_core::pipeline::{EvalOptions, Model, ModelConfig};

fn spectral(c: &mut Criterion) {
    let sphere = primitives::icosphere(3);
    let f = Fixture::new();
    let mut g = c.benchmark_group("spectral_basis");
    g.sample_size(10);
    g.bench_function("icosphere3_n9", |b| b.iter(|| spectral_basis(&sphere, 9).unwrap()));
    g.bench_function("hinged_cylinder_n64", |b| b.iter(|| spectral_basis(&f.mesh, 64).unwrap()));
    g.finish();
}

fn skinning(c: &mut Criterion) {
    let f = Fixture::new();
    c.bench_function("skin_m10", |b| b.iter(|| skin(&f.mesh, &f.parts, &f.pose, None).unwrap()));
}

fn arap(c: &mut Criterion) {
    let f = Fixture::new();
    let energy = Arap::new(&f.mesh).unwrap();
    let x = skin(&f.mesh, &f.parts, &f.pose, None).unwrap();
    c.bench_function("arap_loss_grad", |b| b.iter(|| energy.loss_grad(&x, 0.01).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let f = Fixture::new();
    let net = MlpConfig::narrow(128, 64, 2);
    let config = ModelConfig {
        phi: net,
        psi: net,
        ..Default::default()
    };
    let (model, params) = Model::new(f.mesh.clone(), f.basis.clone(), config, LossWeights::default(), 0).unwrap();
    let data = f.keypoints(50);
    let batch: Vec<_> = data.iter().collect();
    let mut g = c.benchmark_group("objective");
    g.sample_size(10);
    g.bench_function("batch50_value_and_grad", |b| {
        b.iter_batched(
            || (ChaCha8Rng::seed_from_u64(1), Gradients::zeros_like(&params)),
            |(mut rng, mut grads)| {
                model
                    .evaluate(&params, &batch, &mut rng, EvalOptions::default(), &mut grads)
                    .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, spectral, skinning, arap, training_step);
criterion_main!(benches);
