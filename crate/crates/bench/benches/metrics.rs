use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use headlab::metrics::{fid_of_features, mknnd, FeatureExtractor, DEFAULT_K, FEATURE_DIM};
use headlab::raster::Image;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, FEATURE_DIM), |_| rng.gen_range(-1.0..1.0))
}

fn bench_fid(c: &mut Criterion) {
    let a = features(2048, 1);
    let b = features(2048, 2);
    c.bench_function("fid_2048x64", |bn| bn.iter(|| fid_of_features(&a, &b).unwrap()));
}

fn bench_mknnd(c: &mut Criterion) {
    let mut group = c.benchmark_group("mknnd");
    for n in [256, 1024] {
        let f = features(n, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |bn, f| {
            bn.iter(|| mknnd(f, DEFAULT_K).unwrap())
        });
    }
    group.finish();
}

fn bench_extract(c: &mut Criterion) {
    let ext = FeatureExtractor::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs: Vec<Image> = (0..128)
        .map(|_| Image::from_shape_fn((32, 32, 3), |_| rng.gen::<f32>()))
        .collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    c.bench_function("extract_128x32x32", |bn| bn.iter(|| ext.extract(&refs).unwrap()));
}

criterion_group!(benches, bench_fid, bench_mknnd, bench_extract);
criterion_main!(benches);
