use flowreg_core::geometry::{PointCloud, RigidTransform};
use flowreg_core::model::train::{train, TrainConfig, TrainSample};
use flowreg_core::model::ModelConfig;
use flowreg_core::sampling::SampledView;
use nalgebra::{DMatrix, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn toy_train_sample(cfg: &ModelConfig, seed: u64) -> TrainSample {
    let mut r = ChaCha12Rng::seed_from_u64(seed);
    let views: Vec<SampledView> = (0..2)
        .map(|_| {
            let n = r.random_range(5..9);
            let pts: Vec<Point3<f64>> = (0..n)
                .map(|_| Point3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
                .collect();
            let keypoints = PointCloud::new(pts).unwrap();
            SampledView {
                source_reduced: keypoints.clone(),
                descriptors: DMatrix::from_fn(n, cfg.descriptor_dim, |i, j| ((i * 3 + j) % 7) as f64 * 0.1),
                keypoints,
                keypoint_indices: (0..n).collect(),
            }
        })
        .collect();
    let gt_poses = vec![
        RigidTransform::identity(),
        RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(0.4, 0.0, 0.2)).unwrap(),
    ];
    TrainSample { views, gt_poses }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let lrm: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let mut cfg = ModelConfig::default();
    if let Ok(nf) = std::env::var("NFREQ") { cfg.fourier_frequencies = nf.parse().unwrap(); }
    let mut optimizer = flowreg_core::model::optim::AdamConfig::default();
    optimizer.lr_matrix = lrm;
    optimizer.lr_vector = lrm / 10.0;
    if let Ok(b2) = std::env::var("BETA2") { optimizer.beta2 = b2.parse().unwrap(); }
    let mut lr_halve_epochs = Vec::new();
    if let Ok(h) = std::env::var("HALVE") {
        lr_halve_epochs = h.split(',').map(|s| s.parse().unwrap()).collect();
    }
    let train_cfg = TrainConfig { epochs, max_tokens: 4096, seed: 7, optimizer, lr_halve_epochs, ..TrainConfig::default() };
    let dataset = vec![toy_train_sample(&cfg, 77)];
    // Fixed evaluation battery: same draws before and after training.
    let eval_batch: Vec<_> = (0..16)
        .map(|i| {
            flowreg_core::model::train::prepare_sample(&dataset[0], &cfg, 7, 1_000_000 + i, 0)
                .unwrap()
        })
        .collect();
    let init = flowreg_core::model::Parameters::init(&cfg).unwrap();
    let (before, _) = flowreg_core::model::cfm_loss(&init, &eval_batch).unwrap();
    let (params, report) = train(&dataset, &cfg, train_cfg, None).unwrap();
    let (after, _) = flowreg_core::model::cfm_loss(&params, &eval_batch).unwrap();
    println!("eval loss before {before:.4} after {after:.4} ratio {:.3}", after / before);
    let n = report.losses.len();
    println!("train curve: first {:.4} last {:.4}", report.losses[..10.min(n)].iter().sum::<f64>() / 10f64.min(n as f64), report.losses[n.saturating_sub(10)..].iter().sum::<f64>() / 10f64.min(n as f64));
}
