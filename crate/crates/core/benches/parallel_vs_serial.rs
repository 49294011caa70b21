//! Rayon-backed data-parallel paths vs the sequential fallback on the
//! library's own workloads. `par::map*` is what every hot loop in the crate
//! goes through; `par::map*_serial` is the fallback used when the `parallel`
//! feature is off. Both produce bit-identical results.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use flowreg_core::geometry::{chamfer_distance, NearestNeighborGrid, PointCloud};
use flowreg_core::model::train::prepare_sample;
use flowreg_core::model::{cfm_loss, ModelConfig, Parameters};
use flowreg_core::par;
use flowreg_core::sampling::{sample_view, SamplingConfig};

fn random_cloud(seed: u64, n: usize, extent: f64) -> PointCloud {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    PointCloud::from_xyz((0..n).map(|_| {
        [
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
        ]
    }))
    .unwrap()
}

/// Nearest-neighbor sweep, the inner loop of the Chamfer distance.
fn bench_nearest_neighbor_sweep(c: &mut Criterion) {
    let cloud_a = random_cloud(1, 4_000, 5.0);
    let cloud_b = random_cloud(2, 4_000, 5.0);
    let grid = NearestNeighborGrid::build(cloud_b.points());
    let mut group = c.benchmark_group("nn_sweep_4k");
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(cloud_a.points(), |p| grid.nearest(p).1))
    });
    group.bench_function("serial", |b| {
        b.iter(|| par::map_serial(cloud_a.points(), |p| grid.nearest(p).1))
    });
    group.finish();

    // Sanity: identical outputs.
    assert_eq!(
        par::map(cloud_a.points(), |p| grid.nearest(p).1),
        par::map_serial(cloud_a.points(), |p| grid.nearest(p).1)
    );
    let _ = chamfer_distance(&cloud_a, &cloud_b).unwrap();
}

/// Per-view preprocessing of a multi-view scene.
fn bench_per_view_sampling(c: &mut Criterion) {
    let views: Vec<PointCloud> = (0..6).map(|i| random_cloud(10 + i, 8_000, 5.0)).collect();
    let cfg = SamplingConfig {
        voxel_size_downsample: 0.25,
        voxel_size_coverage: 0.4,
        fps_density_ratio: 0.05,
        outlier_neighbors: 8,
        seed: 3,
        ..SamplingConfig::default()
    };
    let mut group = c.benchmark_group("sample_6_views_8k");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(&views, |v| sample_view(v, &cfg).unwrap()))
    });
    group.bench_function("serial", |b| {
        b.iter(|| par::map_serial(&views, |v| sample_view(v, &cfg).unwrap()))
    });
    group.finish();
}

/// Batched loss + gradients, the training inner loop.
fn bench_batch_gradients(c: &mut Criterion) {
    let model_cfg = ModelConfig {
        blocks: 2,
        hidden: 64,
        heads: 4,
        ..ModelConfig::default()
    };
    let params = Parameters::init(&model_cfg).unwrap();
    // Borrow the CLI test's toy scene shape: a couple of small views.
    let scene = {
        use flowreg_core::curation::{generate_synthetic_scene, SceneConfig};
        use flowreg_core::model::train::TrainSample;
        let scene_cfg = SceneConfig {
            min_points: 3_000,
            max_points: 5_000,
            ..SceneConfig::default()
        };
        let sample = generate_synthetic_scene(5, 2, &scene_cfg).unwrap();
        let cfg = SamplingConfig {
            voxel_size_downsample: 0.4,
            voxel_size_coverage: 0.5,
            fps_density_ratio: 0.08,
            outlier_neighbors: 8,
            seed: 4,
            ..SamplingConfig::default()
        };
        TrainSample {
            views: sample
                .views
                .iter()
                .map(|v| sample_view(v, &cfg).unwrap())
                .collect(),
            gt_poses: sample.gt_poses,
        }
    };
    let batch: Vec<_> = (0..4)
        .map(|i| prepare_sample(&scene, &model_cfg, 9, i, 0).unwrap())
        .collect();

    let mut group = c.benchmark_group("cfm_gradients_batch4");
    group.sample_size(10);
    group.measurement_time(Duration::from_secs(8));
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || batch.clone(),
            |batch| cfm_loss(&params, &batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("serial", |b| {
        b.iter_batched(
            || batch.clone(),
            |batch| {
                // Sequential reference: per-sample losses one at a time.
                let per: Vec<_> = par::map_serial(&batch, |s| {
                    cfm_loss(&params, std::slice::from_ref(s)).unwrap().0
                });
                per.iter().sum::<f64>() / per.len() as f64
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default()
        .measurement_time(Duration::from_secs(5))
        .warm_up_time(Duration::from_secs(1));
    targets = bench_nearest_neighbor_sweep, bench_per_view_sampling, bench_batch_gradients
}
criterion_main!(benches);
