use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use advdenoise_core::training::{configure_model, phase2_step, NoiseSpec, PhasePlan};
use advdenoise_core::{build_denoiser, synthetic, Adam, AdamConfig, MultiScaleConfig};

fn noisy_to_clean_step(c: &mut Criterion) {
    let mut model = build_denoiser::<f32>(MultiScaleConfig::default(), 0).unwrap();
    configure_model(&PhasePlan::noisy_to_clean(1, 4, 0), &mut model).unwrap();
    let batch: Vec<_> = (0..4).map(|i| synthetic::texture(i, 32, 32)).collect();
    let mut opt = Adam::new(AdamConfig::new(1e-3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = NoiseSpec::default();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("noisy_to_clean_batch4_32x32", |bench| {
        bench.iter(|| phase2_step(&mut model, &mut opt, &batch, &noise, 1e-4, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, noisy_to_clean_step);
criterion_main!(benches);
