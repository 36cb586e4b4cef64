use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star4d::par::Execution;
use star4d::scene_synth::{make_orbit_cameras, random_scene, render_scene_with, SceneParams};
use star4d::st_container::local_density;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scene_render(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (spec, _) = random_scene(&mut rng, 4, &SceneParams::default());
    let cams = make_orbit_cameras(4, 2.5, 0.3, [0.0; 3], 0.8, (32, 32)).unwrap();
    let mut group = c.benchmark_group("render_scene_t4_v4_32px");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render_scene_with(&spec, &cams, 4, exec).unwrap())
        });
    }
    group.finish();
}

fn density_batch(c: &mut Criterion) {
    // one density-peaks pool per object, as in a training batch
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, dim) = (256, 64);
    let pools: Vec<Vec<f64>> = (0..16).map(|_| (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut group = c.benchmark_group("local_density_16x256x64");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(pools.len(), |i| local_density(&pools[i], dim, 8).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, scene_render, density_batch);
criterion_main!(benches);
