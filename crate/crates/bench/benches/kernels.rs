use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sit_core::data::synthetic_dataset;
use sit_core::pretext::make_pretext_batch;
use sit_core::{ModelConfig, PretextParams, SiTModel, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let a = random(&[n, n], 1);
        let b = random(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(&b).unwrap()));
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let model = SiTModel::<f32>::new(ModelConfig::tiny_cifar()).unwrap();
    let images = random(&[8, 3, 32, 32], 3);
    c.bench_function("tiny_cifar forward, batch 8", |bench| {
        bench.iter(|| {
            let mut tape = Tape::inference();
            model.forward(&mut tape, &images).unwrap().recon
        })
    });
    c.bench_function("tiny_cifar forward+backward, batch 8", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &images).unwrap();
            let loss = tape.mean(out.recon);
            tape.backward(loss).unwrap()
        })
    });
}

fn pretext(c: &mut Criterion) {
    let data = synthetic_dataset(16, 10, 32, 0).unwrap();
    let params = PretextParams {
        augment: Default::default(),
        corruption: Default::default(),
        image_size: 32,
        patch_size: 4,
        rotate: true,
    };
    c.bench_function("pretext batch, 16 sources at 32px", |bench| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bench.iter(|| make_pretext_batch(&data.images, &params, &mut rng).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, forward_backward, pretext
}
criterion_main!(benches);
