use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use frl_core::complexity::png_code_length;
use frl_core::data::{synth_ood, Image, SynthKind};
use frl_core::frequency::{augment, FrequencyConfig, Method};
use frl_core::models::{sample_seed, GenerativeModel, InputSpec, QuantImage, VaeConfig, VaeModel};
use frl_core::scoring::auroc;
use frl_core::tensor::{ConvSpec, Graph, PadMode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize) -> Vec<Image> {
    synth_ood(SynthKind::Noise, n, (28, 28, 1), 3).unwrap().into_images()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::from_fn([16, 32, 14, 14], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f32>::from_fn([64, 32, 4, 4], |_| rng.random_range(-0.1..0.1));
    let spec = ConvSpec::new(2, 1, PadMode::Zero);
    c.bench_function("conv2d fwd+bwd 16x32x14x14 -> 64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.leaf(x.clone()), g.leaf(w.clone()));
            let y = g.conv2d(xv, wv, &spec).unwrap();
            let loss = g.sum(y).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn frequency(c: &mut Criterion) {
    let img = &images(1)[0];
    for m in Method::ALL {
        let cfg = FrequencyConfig::with_method(m);
        c.bench_function(&format!("augment 28x28 {}", m.name()), |b| b.iter(|| black_box(augment(img, &cfg).unwrap())));
    }
}

fn complexity(c: &mut Criterion) {
    let img = &images(1)[0];
    c.bench_function("png code length 28x28 noise", |b| b.iter(|| black_box(png_code_length(img))));
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
    let o: Vec<f64> = (0..1000).map(|_| rng.random::<f64>() + 0.2).collect();
    c.bench_function("auroc 1k vs 1k", |b| b.iter(|| black_box(auroc(&a, &o).unwrap())));
}

fn vae(c: &mut Criterion) {
    let spec = InputSpec::new(28, 28, 2, 256).unwrap();
    let m = VaeModel::<f32>::new(spec, VaeConfig { latent_dim: 100, ..VaeConfig::default() }).unwrap();
    let cfg = FrequencyConfig::default();
    let data: Vec<QuantImage> = images(64).iter().map(|i| QuantImage::augmented(i, &cfg, 256).unwrap()).collect();
    let batch: Vec<&QuantImage> = data.iter().collect();
    let seeds: Vec<u64> = (0..64).map(|i| sample_seed(0, i)).collect();
    let mut group = c.benchmark_group("vae 28x28x2");
    group.sample_size(10);
    group.bench_function("train step, batch 64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = m.params().bind(&mut g, true);
            let loss = m.loss(&mut g, &p, &batch, &seeds).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
    group.bench_function("iwae nll, K=20, one image", |b| {
        b.iter(|| black_box(m.iwae_nll_bits(&data[0], 20, 0).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, frequency, complexity, metrics, vae);
criterion_main!(benches);
