//! Integrator and pose-recovery checks against analytic fields and oracles.

mod support;

use flowreg_core::canonical::{CanonicalizedViews, FlowState};
use flowreg_core::geometry::{
    rigidity_residual, translation_error_m, PointCloud, RigidTransform, SimilarityTransform,
};
use flowreg_core::model::{ConditionTokens, Mat};
use flowreg_core::sampler::{
    euler_integrate, lift_to_metric, recover_poses, rigidity_forcing_integrate,
    select_by_rigidity, VelocityField,
};
use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::RefCell;
use support::*;

/// The analytic straight-path field: V ≡ X(1) − X(0).
struct OracleVelocity {
    x0: Vec<Point3<f64>>,
    x1: Vec<Point3<f64>>,
}

impl VelocityField for OracleVelocity {
    fn velocity(
        &self,
        _t: f64,
        _state: &FlowState,
        _cond: &ConditionTokens,
    ) -> flowreg_core::Result<Mat> {
        let mut v = Mat::zeros(self.x0.len(), 3);
        for (i, (a, b)) in self.x0.iter().zip(self.x1.iter()).enumerate() {
            let d = b - a;
            v.row_mut(i).copy_from_slice(&[d.x, d.y, d.z]);
        }
        Ok(v)
    }
}

/// Oracle degraded like an imperfect learned field: its prediction noise
/// grows with the state's distance from the per-view rigid manifold, the way
/// a trained model degrades once the trajectory drifts off the distribution
/// it was trained on. Rigidity forcing holds the trajectory on-manifold, so
/// it sees the oracle at its best.
struct ManifoldSensitiveOracle {
    oracle: OracleVelocity,
    inputs: Vec<PointCloud>,
    sigma: f64,
    /// Noise gain per unit of rigidity residual of the implied clean state.
    drift_gain: f64,
    calls: RefCell<u64>,
    seed: u64,
}

impl VelocityField for ManifoldSensitiveOracle {
    fn velocity(
        &self,
        t: f64,
        state: &FlowState,
        cond: &ConditionTokens,
    ) -> flowreg_core::Result<Mat> {
        let mut v = self.oracle.velocity(t, state, cond)?;
        // Distance from the training manifold: rigidity residual of the
        // clean estimate implied by the exact velocity.
        let clean: Vec<Point3<f64>> = state
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = v.row(i);
                Point3::new(p.x - t * row[0], p.y - t * row[1], p.z - t * row[2])
            })
            .collect();
        let clean_state =
            FlowState::new(clean, 0.0, state.view_counts.clone()).unwrap();
        let off_manifold =
            rigidity_residual(&clean_state.view_clouds(), &self.inputs).unwrap();
        let noise_scale = self.sigma * (1.0 + self.drift_gain * off_manifold);
        let call = {
            let mut c = self.calls.borrow_mut();
            *c += 1;
            *c
        };
        let mut r = rng(self.seed.wrapping_add(call));
        for x in v.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut r);
            *x += noise_scale * n;
        }
        Ok(v)
    }
}

fn dummy_cond(view_counts: &[usize]) -> ConditionTokens {
    ConditionTokens {
        tokens: Mat::zeros(view_counts.iter().sum(), 1),
        view_counts: view_counts.to_vec(),
        scale: 1.0,
    }
}

/// Builds a rigid-consistent scenario: canonical inputs per view plus a
/// target that moves each view rigidly.
fn rigid_scenario(
    seed: u64,
    views: usize,
    points_per_view: usize,
) -> (Vec<PointCloud>, Vec<RigidTransform>, FlowState) {
    let mut r = rng(seed);
    let mut inputs = Vec::new();
    let mut poses = Vec::new();
    let mut target_points = Vec::new();
    let mut counts = Vec::new();
    for _ in 0..views {
        let pts = random_points(&mut r, points_per_view, 1.0);
        let pose = RigidTransform::new(
            random_rotation_matrix(&mut r),
            Vector3::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ),
        )
        .unwrap();
        target_points.extend(pts.iter().map(|p| pose.apply_point(p)));
        inputs.push(PointCloud::new(pts).unwrap());
        poses.push(pose);
        counts.push(points_per_view);
    }
    let target = FlowState::new(target_points, 0.0, counts).unwrap();
    (inputs, poses, target)
}

fn gaussian_noise_like(state: &FlowState, seed: u64) -> FlowState {
    let mut r = rng(seed);
    let points = (0..state.len())
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut r);
            let y: f64 = StandardNormal.sample(&mut r);
            let z: f64 = StandardNormal.sample(&mut r);
            Point3::new(x, y, z)
        })
        .collect();
    FlowState::new(points, 1.0, state.view_counts.clone()).unwrap()
}

#[test]
fn euler_trajectory_visits_uniform_times_exactly() {
    struct TimeProbe(RefCell<Vec<f64>>);
    impl VelocityField for TimeProbe {
        fn velocity(
            &self,
            t: f64,
            state: &FlowState,
            _cond: &ConditionTokens,
        ) -> flowreg_core::Result<Mat> {
            self.0.borrow_mut().push(t);
            Ok(Mat::zeros(state.len(), 3))
        }
    }
    let (_, _, target) = rigid_scenario(1, 2, 5);
    let noise = gaussian_noise_like(&target, 2);
    let probe = TimeProbe(RefCell::new(Vec::new()));
    let out = euler_integrate(&probe, &noise, &dummy_cond(&target.view_counts), 10).unwrap();
    let visited = probe.0.borrow();
    let expected: Vec<f64> = (0..10).map(|k| (10 - k) as f64 / 10.0).collect();
    assert_eq!(*visited, expected);
    assert_eq!(out.time, 0.0);
}

#[test]
fn forcing_with_oracle_recovers_rigid_targets_exactly_for_any_steps() {
    for steps in [1usize, 2, 10] {
        let (inputs, _, target) = rigid_scenario(7, 3, 12);
        let noise = gaussian_noise_like(&target, 8);
        let field = OracleVelocity {
            x0: target.points.clone(),
            x1: noise.points.clone(),
        };
        let cond = dummy_cond(&target.view_counts);
        let forced =
            rigidity_forcing_integrate(&field, &noise, &cond, &inputs, steps).unwrap();
        for (got, want) in forced.state.points.iter().zip(target.points.iter()) {
            assert!(
                (got - want).norm() < 1e-9,
                "steps={steps}: forcing should recover a rigid-consistent target"
            );
        }
        assert!(forced.residual < 1e-9);
    }
}

#[test]
fn forced_output_is_exactly_rigid_for_arbitrary_fields() {
    // Even under a garbage velocity field the final output must be an exact
    // per-view rigid motion of the inputs.
    struct Chaotic;
    impl VelocityField for Chaotic {
        fn velocity(
            &self,
            t: f64,
            state: &FlowState,
            _cond: &ConditionTokens,
        ) -> flowreg_core::Result<Mat> {
            let mut v = Mat::zeros(state.len(), 3);
            for (i, p) in state.points.iter().enumerate() {
                v.row_mut(i).copy_from_slice(&[
                    (7.3 * p.x + t).sin() * 2.0,
                    (3.1 * p.y - t).cos(),
                    p.z * p.x - 0.3 * t,
                ]);
            }
            Ok(v)
        }
    }
    let (inputs, _, target) = rigid_scenario(11, 2, 9);
    let noise = gaussian_noise_like(&target, 12);
    let cond = dummy_cond(&target.view_counts);
    let forced = rigidity_forcing_integrate(&Chaotic, &noise, &cond, &inputs, 10).unwrap();
    let residual = rigidity_residual(&forced.state.view_clouds(), &inputs).unwrap();
    assert!(
        residual < 1e-9,
        "terminal projection must leave zero rigidity residual, got {residual}"
    );
}

#[test]
fn forcing_beats_plain_euler_under_velocity_noise() {
    // Pose error against ground truth, selected over the views.
    let trials = 100;
    let mut forcing_wins = 0;
    for trial in 0..trials {
        let (inputs, poses, target) = rigid_scenario(1000 + trial, 2, 16);
        let noise = gaussian_noise_like(&target, 2000 + trial);
        let cond = dummy_cond(&target.view_counts);
        let make_field = |seed: u64| ManifoldSensitiveOracle {
            oracle: OracleVelocity {
                x0: target.points.clone(),
                x1: noise.points.clone(),
            },
            inputs: inputs.clone(),
            sigma: 0.02,
            drift_gain: 80.0,
            calls: RefCell::new(0),
            seed,
        };
        let pose_error = |state: &FlowState| -> f64 {
            let recovered = recover_poses(state, &inputs).unwrap();
            recovered
                .iter()
                .zip(poses.iter())
                .map(|(est, gt)| {
                    precise_rotation_angle_deg(gt.rotation(), est.rotation())
                        + translation_error_m(gt.translation(), est.translation())
                })
                .sum::<f64>()
        };
        let forced = rigidity_forcing_integrate(
            &make_field(50_000 + trial),
            &noise,
            &cond,
            &inputs,
            10,
        )
        .unwrap();
        let plain =
            euler_integrate(&make_field(50_000 + trial), &noise, &cond, 10).unwrap();
        if pose_error(&forced.state) < pose_error(&plain) {
            forcing_wins += 1;
        }
    }
    assert!(
        forcing_wins >= 80,
        "forcing won only {forcing_wins}/{trials} trials"
    );
}

#[test]
fn selection_matches_exhaustive_residual_recomputation() {
    let mut r = rng(31);
    for _ in 0..50 {
        let (inputs, _, target) = rigid_scenario(r.random(), 2, 10);
        let generations: Vec<FlowState> = (0..5)
            .map(|g| {
                let mut pts = target.points.clone();
                let sigma = 0.01 * (g as f64 + r.random_range(0.0..1.0));
                for p in pts.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut r);
                    p.x += sigma * n;
                    let n: f64 = StandardNormal.sample(&mut r);
                    p.y += sigma * n;
                    let n: f64 = StandardNormal.sample(&mut r);
                    p.z += sigma * n;
                }
                FlowState::new(pts, 0.0, target.view_counts.clone()).unwrap()
            })
            .collect();
        let (chosen, residuals) = select_by_rigidity(&generations, &inputs).unwrap();
        // Recompute with the independent Horn-based evaluation.
        let independent: Vec<f64> = generations
            .iter()
            .map(|g| {
                let pred: Vec<Vec<Point3<f64>>> =
                    g.view_slices().into_iter().map(|s| s.to_vec()).collect();
                let inp: Vec<Vec<Point3<f64>>> =
                    inputs.iter().map(|c| c.points().to_vec()).collect();
                direct_rigidity_residual(&pred, &inp)
            })
            .collect();
        let oracle_choice = independent
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(chosen, oracle_choice);
        for (a, b) in residuals.iter().zip(independent.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn recovered_poses_are_left_equivariant_under_global_motion() {
    let mut r = rng(41);
    for _ in 0..50 {
        let (inputs, _, target) = rigid_scenario(r.random(), 3, 10);
        let base_poses = recover_poses(&target, &inputs).unwrap();
        let g = RigidTransform::new(
            random_rotation_matrix(&mut r),
            Vector3::new(0.4, -1.2, 2.0),
        )
        .unwrap();
        let moved = FlowState::new(
            target.points.iter().map(|p| g.apply_point(p)).collect(),
            0.0,
            target.view_counts.clone(),
        )
        .unwrap();
        let moved_poses = recover_poses(&moved, &inputs).unwrap();
        for (base, moved) in base_poses.iter().zip(moved_poses.iter()) {
            let expected = g.compose(base);
            assert!(
                precise_rotation_angle_deg(expected.rotation(), moved.rotation()) < 1e-6
            );
            assert!(
                translation_error_m(expected.translation(), moved.translation()) < 1e-9
            );
        }
    }
}

#[test]
fn recovered_poses_match_the_horn_solver_on_noisy_estimates() {
    let mut r = rng(43);
    for _ in 0..50 {
        let (inputs, _, target) = rigid_scenario(r.random(), 2, 14);
        let mut pts = target.points.clone();
        for p in pts.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut r);
            p.x += 0.02 * n;
            let n: f64 = StandardNormal.sample(&mut r);
            p.y += 0.02 * n;
            let n: f64 = StandardNormal.sample(&mut r);
            p.z += 0.02 * n;
        }
        let noisy = FlowState::new(pts, 0.0, target.view_counts.clone()).unwrap();
        let ours = recover_poses(&noisy, &inputs).unwrap();
        let slices = noisy.view_slices();
        for (v, pose) in ours.iter().enumerate() {
            let (hr, ht) = horn_align(inputs[v].points(), slices[v]);
            assert!(precise_rotation_angle_deg(&hr, pose.rotation()) < 1e-6);
            assert!(translation_error_m(&ht, pose.translation()) < 1e-9);
        }
    }
}

#[test]
fn lifted_keypoints_match_metric_pose_application() {
    let mut r = rng(47);
    for _ in 0..20 {
        let raw_keypoints: Vec<PointCloud> = (0..2)
            .map(|_| PointCloud::new(random_points(&mut r, 10, 4.0)).unwrap())
            .collect();
        let scale = r.random_range(0.5..6.0);
        let view_transforms: Vec<SimilarityTransform> = (0..2)
            .map(|_| {
                SimilarityTransform::new(
                    1.0 / scale,
                    random_rotation_matrix(&mut r),
                    Vector3::new(r.random_range(-1.0..1.0), 0.0, 0.3),
                )
                .unwrap()
            })
            .collect();
        let canon = CanonicalizedViews {
            normalized_keypoints: raw_keypoints
                .iter()
                .zip(view_transforms.iter())
                .map(|(k, t)| t.apply_cloud(k))
                .collect(),
            view_transforms: view_transforms.clone(),
            global_scale: scale,
            reference_view: 0,
            reference_rotation: Matrix3::identity(),
        };
        let poses: Vec<RigidTransform> = (0..2)
            .map(|_| {
                RigidTransform::new(
                    random_rotation_matrix(&mut r),
                    Vector3::new(0.1, -0.4, 0.9),
                )
                .unwrap()
            })
            .collect();
        let (metric, registered) = lift_to_metric(&poses, &canon, &raw_keypoints).unwrap();
        for v in 0..2 {
            // Route A: metric pose applied to the raw keypoints.
            // Route B: canonical pose applied to canonical keypoints, then
            // unscaled by s.
            let canonical_pts = canon.view_transforms[v].apply_cloud(&raw_keypoints[v]);
            for (i, p) in canonical_pts.iter().enumerate() {
                let via_canonical = Point3::from(poses[v].apply_point(p).coords * scale);
                let via_metric = metric[v].apply_point(&raw_keypoints[v].points()[i]);
                assert!((via_canonical - via_metric).norm() < 1e-6);
                assert!((registered[v].points()[i] - via_metric).norm() < 1e-12);
            }
        }
    }
}
