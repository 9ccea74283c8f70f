use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use depthscape::data::Dataset;
use depthscape::pipeline::phase1_sample_depths;
use depthscape::tensor::Tensor;
use depthscape::{fid, sample_z, shift_segment_depth, Generator, Mode, ModelConfig, RandomConvExtractor, TrainState};

fn narrow(mode: Mode, resolution: usize) -> ModelConfig {
    let mut c = ModelConfig::desk64(mode);
    c.output_resolution = resolution;
    let layers = c.num_layers();
    c.channels = (0..layers).map(|i| if i + 1 == layers { 8 } else { 16 }).collect();
    c.base_latent_shape = [16, 8, 8];
    c
}

fn generation(c: &mut Criterion) {
    let data = Dataset::synthetic(0, 1, 64).unwrap();
    let t = &data.triplets[0];
    let g = Generator::<f32>::new(&ModelConfig::desk64(Mode::Sd2i)).unwrap();
    let z = sample_z(g.config().z_dim, 1);
    c.bench_function("generate_desk64_sd2i", |b| {
        b.iter(|| g.generate(black_box(&t.seg), Some(&t.depth), &z, 2).unwrap())
    });
    let s2d = Generator::<f32>::new(&ModelConfig::desk64(Mode::S2d)).unwrap();
    c.bench_function("phase1_four_depths_desk64", |b| {
        b.iter(|| phase1_sample_depths(&s2d, black_box(&t.seg), 4, 3).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let config = narrow(Mode::Sd2i, 32);
    let data = Dataset::synthetic(0, 8, 32).unwrap();
    let mut state = TrainState::new(&config, 0).unwrap();
    let batch = data.batch_for_step(Mode::Sd2i, 8, 0, 0).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_narrow32_batch8", |b| b.iter(|| state.train_step(&batch).unwrap()));
    group.finish();
}

fn editing_and_metrics(c: &mut Criterion) {
    let data = Dataset::synthetic(0, 32, 64).unwrap();
    let t = &data.triplets[0];
    c.bench_function("shift_segment_depth_64", |b| {
        b.iter(|| shift_segment_depth(black_box(&t.depth), &t.seg, 0, -0.01).unwrap())
    });
    let ex = RandomConvExtractor::default_for(3);
    let real: Vec<Tensor<f32>> = data.triplets.iter().map(|t| t.image.to_tensor()).collect();
    let fake: Vec<Tensor<f32>> = real.iter().map(|t| t.map(|v| v * 0.9)).collect();
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    group.bench_function("fid_32_images_64", |b| b.iter(|| fid(black_box(&real), &fake, &ex).unwrap()));
    group.finish();
}

criterion_group!(benches, generation, training, editing_and_metrics);
criterion_main!(benches);
