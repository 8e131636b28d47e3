use criterion::{criterion_group, criterion_main, Criterion};
use headlab::camera::{sample_pose, PoseDistribution};
use headlab::gan::{Generator, TrainBatch, TrainState};
use headlab::harness::{RunConfig, Session};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.subjects = 16;
    cfg.embed_dim = 64;
    cfg
}

fn bench_generate(c: &mut Criterion) {
    let cfg = desk_config();
    let g = Generator::new(&cfg.gan_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z: Vec<Vec<f64>> = (0..cfg.batch).map(|_| g.sample_z(&mut rng)).collect();
    let conds = vec![vec![0.1; cfg.embed_dim]; cfg.batch];
    let poses: Vec<_> = (0..cfg.batch)
        .map(|_| sample_pose(&PoseDistribution::full_sphere(), &mut rng))
        .collect();
    c.bench_function("generate_batch8_16x16_x2", |b| {
        b.iter(|| g.generate(&z, &conds, &poses).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let session = Session::open(desk_config()).unwrap();
    let mut state = TrainState::new(&session.cfg.gan_config(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = TrainBatch::sample(
        &state.g,
        &session.ds,
        &session.table,
        session.cfg.batch,
        &PoseDistribution::full_sphere(),
        &mut rng,
    )
    .unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_batch8_16x16_x2", |b| {
        b.iter(|| state.train_step(&batch).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_generate, bench_train_step);
criterion_main!(benches);
