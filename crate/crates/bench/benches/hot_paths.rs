//! Benchmarks for the paths that dominate wall time: field rendering,
//! illumination preprocessing, multi-crop sampling, one optimizer step, and
//! profile scoring.

use std::collections::BTreeSet;
use std::hint::black_box;

use candle_core::{DType, Device};
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wsdino_core::backbone::ViTConfig;
use wsdino_core::distillation::{train_step, TrainState};
use wsdino_core::imaging::{preprocess_image, PreprocessParams};
use wsdino_core::evaluation::{evaluate, BatchExclusion};
use wsdino_core::normalization::{fit_tvn, TreatmentProfile};
use wsdino_core::sampling::{make_views, random_resized_crop, CropPlan, CropSpec};
use wsdino_core::synthgen::{build_scene, neutral_morphology, render_channel, SyntheticSpec};

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Array2<f32> {
    Array2::from_shape_fn((side, side), |_| rng.gen_range(-1.0..1.0))
}

fn bench_render(c: &mut Criterion) {
    let spec = SyntheticSpec::toy();
    let scene = build_scene(&spec, &neutral_morphology(), "bench-field");
    c.bench_function("render_channel_96px", |b| {
        b.iter(|| black_box(render_channel(&spec, &scene, 0, 0, "bench-field")))
    });
}

fn bench_preprocess(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let image = Array2::from_shape_fn((96, 96), |_| rng.gen_range(0.0..4096.0f32));
    let params = PreprocessParams {
        filter_size: 96,
        target_rows: 96,
        target_cols: 96,
        cutoff: 65535.0,
    };
    c.bench_function("preprocess_image_96px", |b| {
        b.iter(|| preprocess_image(black_box(&image), &params, "bench").unwrap())
    });
}

fn bench_crops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let image_i = random_image(&mut rng, 96);
    let image_j = random_image(&mut rng, 96);
    let spec = CropSpec::toy();
    let plan = CropPlan {
        size: 48,
        scale: (0.25, 0.45),
    };
    c.bench_function("random_resized_crop_96to48", |b| {
        b.iter(|| random_resized_crop(black_box(&image_i), &plan, 0.5, &mut rng).unwrap())
    });
    c.bench_function("make_views_2global_8local", |b| {
        b.iter(|| {
            make_views(
                black_box(&image_i),
                black_box(&image_j),
                &spec,
                ("i".into(), "j".into()),
                &mut rng,
            )
            .unwrap()
        })
    });
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        patch_size: 8,
        embed_dim: 16,
        depth: 1,
        n_heads: 2,
        mlp_ratio: 2,
        head_layers: 2,
        head_hidden: 16,
        head_bottleneck: 8,
        head_output: 16,
        ref_grid: 6,
    }
}

fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut state =
        TrainState::new(tiny_vit(), 7, &Device::Cpu, DType::F32, 0.99, 0.9, true).unwrap();
    let spec = CropSpec {
        global: CropPlan {
            size: 32,
            scale: (0.3, 0.6),
        },
        local: CropPlan {
            size: 16,
            scale: (0.08, 0.25),
        },
        n_local: 8,
        flip_prob: 0.5,
    };
    let mut batch = Vec::new();
    for p in 0..2 {
        let image_i = random_image(&mut rng, 64);
        let image_j = random_image(&mut rng, 64);
        let views = make_views(
            &image_i,
            &image_j,
            &spec,
            (format!("i{p}"), format!("j{p}")),
            &mut rng,
        )
        .unwrap();
        batch.push(views);
    }
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("train_step_tiny_2pairs", |b| {
        b.iter(|| train_step(&mut state, black_box(&batch), 1e-4, 0.04, 0.1).unwrap())
    });
    group.finish();
}

fn random_profiles(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<TreatmentProfile> {
    (0..n)
        .map(|i| {
            let compound = format!("c{:02}", i / 3);
            let mut batches = BTreeSet::new();
            batches.insert(format!("b{}", i % 3));
            batches.insert(format!("b{}", (i / 2) % 3));
            TreatmentProfile {
                treatment: format!("{}@{}", compound, i % 3),
                compound,
                moa: format!("m{:02}", (i / 3) % 12),
                batches,
                vector: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

fn bench_eval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let profiles = random_profiles(103, 64, &mut rng);
    c.bench_function("evaluate_103_treatments", |b| {
        b.iter(|| {
            evaluation::evaluate(
                black_box(&profiles),
                wsdino_core::evaluation::BatchExclusion::Union,
            )
            .unwrap()
        })
    });
}

fn bench_tvn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let controls: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    c.bench_function("fit_tvn_200x64", |b| {
        b.iter(|| fit_tvn(black_box(&controls), 1e-6, true).unwrap())
    });
}

criterion_group!(
    benches,
    bench_render,
    bench_preprocess,
    bench_crops,
    bench_train_step,
    bench_eval,
    bench_tvn
);
criterion_main!(benches);
