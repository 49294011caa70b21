//! Desk-scale end-to-end probe: synthesize scenes, train the small config,
//! register held-out scenes, and report success rates for the three
//! inference settings (S=5 forced, S=1 forced, S=5 plain Euler).
//!
//! Knobs via env vars for tuning runs:
//!   TRAIN_SCENES, EVAL_SCENES, EPOCHS, MAX_TOKENS, ALPHA, VD, STEPS,
//!   LRM, HALVE (comma list), VIEWS_MAX, CAP_MIN, CAP_MAX

use std::time::Instant;

use flowreg_core::curation::{generate_synthetic_dataset, CurationSample, SceneConfig};
use flowreg_core::eval::multiview_errors;
use flowreg_core::geometry::PointCloud;
use flowreg_core::io::similarity_to_rigid;
use flowreg_core::model::train::{train, TrainConfig, TrainSample};
use flowreg_core::model::ModelConfig;
use flowreg_core::rng::split_seed;
use flowreg_core::sampler::{register_with_seeds, SamplerConfig};
use flowreg_core::sampling::{sample_view, SamplingConfig};

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let train_scenes: usize = env_or("TRAIN_SCENES", 200);
    let eval_scenes: usize = env_or("EVAL_SCENES", 30);
    let epochs: usize = env_or("EPOCHS", 4);
    let max_tokens: usize = env_or("MAX_TOKENS", 1024);
    let alpha: f64 = env_or("ALPHA", 0.08);
    let vd: f64 = env_or("VD", 0.4);
    let cover: f64 = env_or("COVER", 0.5);
    let patch_r: f64 = env_or("PATCH_R", 1.5);
    let steps: usize = env_or("STEPS", 10);
    let lrm: f64 = env_or("LRM", 2e-3);
    let views_max: usize = env_or("VIEWS_MAX", 4);
    let cap_min: f64 = env_or("CAP_MIN", 80.0);
    let cap_max: f64 = env_or("CAP_MAX", 110.0);
    let halve: Vec<usize> = std::env::var("HALVE")
        .ok()
        .map(|h| h.split(',').map(|s| s.parse().unwrap()).collect())
        .unwrap_or_default();

    let scene_cfg = SceneConfig {
        extent: 10.0,
        min_primitives: 5,
        max_primitives: 12,
        min_points: 4000,
        max_points: 9000,
        min_cap_half_angle_deg: cap_min,
        max_cap_half_angle_deg: cap_max,
        min_overlap_ratio: 0.3,
        overlap_voxel_size: 0.5,
        max_center_distance: 100.0,
        min_view_points: 400,
        max_retries: 40,
        min_primitive_frac: env_or("PRIM_LO", 0.03),
        max_primitive_frac: env_or("PRIM_HI", 0.12),
        plane_weight: env_or("PLANE_W", 0.15),
    };
    let sampling_cfg = SamplingConfig {
        voxel_size_downsample: vd,
        voxel_size_coverage: cover,
        patch_radius: Some(patch_r),
        fps_density_ratio: alpha,
        outlier_neighbors: 8,
        outlier_std_ratio: 2.0,
        seed: 11,
        ..SamplingConfig::default()
    };
    let model_cfg = ModelConfig {
        blocks: 4,
        hidden: 128,
        heads: 4,
        parameter_init_seed: 5,
        ..ModelConfig::default()
    };
    let mut optimizer = flowreg_core::model::optim::AdamConfig::default();
    optimizer.lr_matrix = lrm;
    optimizer.lr_vector = lrm / 10.0;
    let train_cfg = TrainConfig {
        epochs,
        max_tokens,
        optimizer,
        lr_halve_epochs: halve,
        checkpoint_every_steps: 0,
        seed: 21,
    };

    let t0 = Instant::now();
    let train_raw =
        generate_synthetic_dataset(train_scenes, (2, views_max), &scene_cfg, 1000).unwrap();
    let eval_raw =
        generate_synthetic_dataset(eval_scenes, (2, views_max), &scene_cfg, 777_000).unwrap();
    println!("synth: {} train + {} eval in {:.1?}", train_raw.len(), eval_raw.len(), t0.elapsed());

    let t1 = Instant::now();
    let prep = |samples: &[CurationSample], tag: u64| -> Vec<TrainSample> {
        flowreg_core::par::map_range(samples.len(), |i| {
            let views = samples[i]
                .views
                .iter()
                .enumerate()
                .map(|(v, cloud)| {
                    let cfg = sampling_cfg
                        .with_seed(split_seed(split_seed(tag, i as u64), v as u64));
                    sample_view(cloud, &cfg).unwrap()
                })
                .collect();
            TrainSample {
                views,
                gt_poses: samples[i].gt_poses.clone(),
            }
        })
    };
    let dataset = prep(&train_raw, 50);
    let tokens: Vec<usize> = dataset.iter().map(|s| s.token_count()).collect();
    let total: usize = tokens.iter().sum();
    println!(
        "preprocess: {:.1?}; tokens/sample mean {:.1} min {} max {}",
        t1.elapsed(),
        total as f64 / dataset.len() as f64,
        tokens.iter().min().unwrap(),
        tokens.iter().max().unwrap()
    );

    let t2 = Instant::now();
    let (params, report) = train(&dataset, &model_cfg, train_cfg, None).unwrap();
    let n = report.losses.len();
    println!(
        "train: {} steps in {:.1?}; loss first10 {:.4} last10 {:.4}",
        n,
        t2.elapsed(),
        report.losses[..10.min(n)].iter().sum::<f64>() / 10f64.min(n as f64),
        report.losses[n.saturating_sub(10)..].iter().sum::<f64>() / 10f64.min(n as f64)
    );

    // Evaluate three settings (optionally on training scenes for a
    // memorization check).
    let eval_raw = if env_or("EVAL_ON_TRAIN", 0usize) == 1 {
        train_raw[..eval_scenes.min(train_raw.len())].to_vec()
    } else {
        eval_raw
    };
    let t3 = Instant::now();
    let settings = [
        ("S=5 forced", 5usize, true),
        ("S=1 forced", 1usize, true),
        ("S=5 plain", 5usize, false),
    ];
    for (name, generations, forcing) in settings {
        let outcomes: Vec<(bool, f64, f64, f64)> = flowreg_core::par::map_range(eval_raw.len(), |i| {
            let sample = &eval_raw[i];
            let sampler_cfg = SamplerConfig {
                steps,
                generations,
                rigidity_forcing: forcing,
                noise_seed: split_seed(33, i as u64),
            };
            let view_seeds: Vec<u64> = (0..sample.views.len())
                .map(|v| split_seed(split_seed(44, i as u64), v as u64))
                .collect();
            let result = match register_with_seeds(
                &sample.views,
                &params,
                &sampler_cfg,
                &sampling_cfg,
                &view_seeds,
            ) {
                Ok(r) => r,
                Err(_) => return (false, 180.0, 1e9, 1e9),
            };
            let est: Vec<_> = result
                .metric_poses
                .iter()
                .map(|s| similarity_to_rigid(s).unwrap())
                .collect();
            // Scene extent from the gt merged cloud.
            let mut merged = Vec::new();
            for (v, pose) in sample.views.iter().zip(sample.gt_poses.iter()) {
                merged.extend(pose.apply_cloud(v).points().to_vec());
            }
            let extent = PointCloud::new(merged).unwrap().longest_bbox_edge();
            let anchor = sample
                .views
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .unwrap();
            let errors = multiview_errors(&est, &sample.gt_poses, anchor).unwrap();
            let max_re = errors.iter().map(|e| e.0).fold(0.0f64, f64::max);
            let max_te = errors.iter().map(|e| e.1).fold(0.0f64, f64::max);
            let ok = errors.iter().all(|&(re, te)| re <= 5.0 && te <= 0.02 * extent);
            (ok, max_re, max_te, result.rigidity_residual)
        });
        let sr = outcomes.iter().filter(|o| o.0).count() as f64 / outcomes.len() as f64 * 100.0;
        let mut res: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
        res.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut tes: Vec<f64> = outcomes.iter().map(|o| o.2).collect();
        tes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = outcomes.len() / 2;
        println!(
            "{name}: SR {sr:.1}%  median max-RE {:.2} deg  median max-TE {:.3} m  median residual {:.4}",
            res[mid], tes[mid],
            { let mut rr: Vec<f64> = outcomes.iter().map(|o| o.3).collect(); rr.sort_by(|a,b| a.partial_cmp(b).unwrap()); rr[mid] }
        );
    }
    println!("eval: {:.1?}", t3.elapsed());
}
