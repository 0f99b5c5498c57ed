//! Metric and inference throughput. Run with and without `--no-default-features`
//! to compare the rayon build against the sequential one.

use criterion::{criterion_group, criterion_main, Criterion};
use image::GrayImage;
use lc3net::data::synthetic_disks;
use lc3net::metrics::{curves_and_avg_f, e_measure, evaluate_dataset, s_measure, GroundTruth, SaliencyMap};
use lc3net::model::{Lc3Net, ModelConfig};
use lc3net::tensor::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 352;

fn mode() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn pair(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let c = SIDE as f64 / 2.0;
    let mut pred = Vec::with_capacity(SIDE * SIDE);
    let mut mask = Vec::with_capacity(SIDE * SIDE);
    for i in 0..SIDE * SIDE {
        let (x, y) = ((i % SIDE) as f64, (i / SIDE) as f64);
        let inside = (x - c).powi(2) + (y - c).powi(2) < (SIDE as f64 / 4.0).powi(2);
        mask.push(if inside { 255 } else { 0 });
        let base: f64 = if inside { 0.8 } else { 0.15 };
        pred.push(((base + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0) * 255.0) as u8);
    }
    (pred, mask)
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (pred, mask) = pair(&mut rng);
    let p = SaliencyMap::from_u8(SIDE, SIDE, &pred).unwrap();
    let g = GroundTruth::from_u8(SIDE, SIDE, &mask).unwrap();
    let mut group = c.benchmark_group("metrics");
    group.bench_function("curves_352", |b| b.iter(|| curves_and_avg_f(&p, &g).unwrap()));
    group.bench_function("s_measure_352", |b| b.iter(|| s_measure(&p, &g).unwrap()));
    group.bench_function("e_measure_352", |b| b.iter(|| e_measure(&p, &g).unwrap()));
    group.finish();
}

fn dataset(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dir = tempfile::tempdir().unwrap();
    let (pred_dir, gt_dir) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();
    for i in 0..16 {
        let (pred, mask) = pair(&mut rng);
        let save = |dir: &std::path::Path, px: Vec<u8>| {
            GrayImage::from_raw(SIDE as u32, SIDE as u32, px).unwrap().save(dir.join(format!("{i:02}.png"))).unwrap()
        };
        save(&pred_dir, pred);
        save(&gt_dir, mask);
    }
    let mut group = c.benchmark_group(format!("evaluate_dataset/{}", mode()));
    group.sample_size(10);
    group.bench_function("16x352", |b| b.iter(|| evaluate_dataset(&pred_dir, &gt_dir).unwrap()));
    group.finish();
}

fn inference(c: &mut Criterion) {
    let model = Lc3Net::new(ModelConfig::default()).unwrap();
    let samples = synthetic_disks(4, 64, 0);
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = Tensor::stack(&images).unwrap();
    let mut group = c.benchmark_group(format!("predict/{}", mode()));
    group.sample_size(10);
    group.bench_function("toy_4x64", |b| b.iter(|| model.predict(&batch).unwrap()));
    group.finish();
}

criterion_group!(benches, metrics, dataset, inference);
criterion_main!(benches);
