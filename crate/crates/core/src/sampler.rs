//! Inference: Euler integration of the learned velocity field, rigidity
//! forcing, rigidity-based generation selection, pose recovery, and lifting
//! back to metric scale.

use nalgebra::{Matrix3, Point3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::canonical::{canonicalize_inputs_with_rotations, random_rotation, CanonicalizedViews, FlowState};
use crate::error::{Error, Result};
use crate::geometry::{kabsch_align, rigidity_residual, PointCloud, RigidTransform, SimilarityTransform};
use crate::model::{embed_condition, velocity_forward, ConditionTokens, Mat, Parameters};
use crate::par;
use crate::rng::{split_seed, stream};
use crate::sampling::{sample_view, SamplingConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Euler steps κ.
    pub steps: usize,
    /// Independent generations S; the lowest-rigidity-residual one is kept.
    pub generations: usize,
    /// Project intermediate estimates onto per-view rigid orbits every step.
    pub rigidity_forcing: bool,
    pub noise_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            generations: 5,
            rigidity_forcing: true,
            noise_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps >= 1 && self.generations >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "sampler needs at least one step and one generation".into(),
            ))
        }
    }
}

/// A velocity field the integrator can query. Implemented by the trained
/// network and by analytic test fields.
pub trait VelocityField {
    fn velocity(&self, t: f64, state: &FlowState, cond: &ConditionTokens) -> Result<Mat>;
}

/// The trained network as a velocity field.
pub struct ModelVelocity<'a> {
    pub params: &'a Parameters,
}

impl VelocityField for ModelVelocity<'_> {
    fn velocity(&self, t: f64, state: &FlowState, cond: &ConditionTokens) -> Result<Mat> {
        velocity_forward(self.params, t, state, cond)
    }
}

fn ensure_finite(points: &[Point3<f64>], step: usize) -> Result<()> {
    for p in points {
        if !p.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
    }
    Ok(())
}

/// Plain Euler integration from `t = 1` down to `t = 0` with uniform steps.
pub fn euler_integrate(
    field: &dyn VelocityField,
    noise: &FlowState,
    cond: &ConditionTokens,
    steps: usize,
) -> Result<FlowState> {
    assert!(steps >= 1);
    let kappa = steps as f64;
    let dt = 1.0 / kappa;
    let mut state = noise.clone();
    for k in 0..steps {
        let t = (steps - k) as f64 / kappa;
        state.time = t;
        let v = field.velocity(t, &state, cond)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
        for (i, p) in state.points.iter_mut().enumerate() {
            let row = v.row(i);
            p.x -= row[0] * dt;
            p.y -= row[1] * dt;
            p.z -= row[2] * dt;
        }
        ensure_finite(&state.points, k)?;
        state.time = (steps - k - 1) as f64 / kappa;
    }
    Ok(state)
}

/// Per-view Kabsch projection of `estimate` onto the rigid orbits of
/// `inputs`, plus the RMS rigidity residual between estimate and projection.
fn project_per_view(
    estimate: &[Point3<f64>],
    view_counts: &[usize],
    inputs: &[PointCloud],
) -> Result<(Vec<Point3<f64>>, Vec<RigidTransform>, f64)> {
    if view_counts.len() != inputs.len() {
        return Err(Error::LengthMismatch {
            expected: inputs.len(),
            got: view_counts.len(),
        });
    }
    let mut projected = Vec::with_capacity(estimate.len());
    let mut poses = Vec::with_capacity(inputs.len());
    let mut sum_sq = 0.0;
    let mut offset = 0;
    for (input, &count) in inputs.iter().zip(view_counts.iter()) {
        if input.len() != count {
            return Err(Error::LengthMismatch {
                expected: input.len(),
                got: count,
            });
        }
        let segment = &estimate[offset..offset + count];
        let target = PointCloud::from_points_unchecked(segment.to_vec());
        let pose = kabsch_align(input, &target)?;
        for (est, src) in segment.iter().zip(input.iter()) {
            let proj = pose.apply_point(src);
            sum_sq += (est - proj).norm_squared();
            projected.push(proj);
        }
        poses.push(pose);
        offset += count;
    }
    let residual = (sum_sq / estimate.len() as f64).sqrt();
    Ok((projected, poses, residual))
}

/// Result of one rigidity-forced integration.
#[derive(Debug, Clone)]
pub struct ForcedIntegration {
    /// Final state: every view is an exact rigid motion of its input.
    pub state: FlowState,
    /// The last pre-projection clean estimate Ŷ(0); selection residuals are
    /// measured here, since the post-projection residual is identically zero.
    pub pre_projection: FlowState,
    /// RMS rigidity residual of `pre_projection`.
    pub residual: f64,
}

/// Euler integration that extrapolates the clean estimate each step,
/// projects it per view onto the rigid orbit of the canonical inputs, and
/// re-forms the state at the next time on the noise line. After the final
/// step the output is the rigid projection itself.
pub fn rigidity_forcing_integrate(
    field: &dyn VelocityField,
    noise: &FlowState,
    cond: &ConditionTokens,
    inputs: &[PointCloud],
    steps: usize,
) -> Result<ForcedIntegration> {
    assert!(steps >= 1);
    for input in inputs {
        if input.len() < 3 {
            return Err(Error::TooFewPoints {
                needed: 3,
                got: input.len(),
            });
        }
    }
    let kappa = steps as f64;
    let mut state = noise.clone();
    let mut last_pre = noise.clone();
    let mut last_residual = 0.0;
    for k in 0..steps {
        let t = (steps - k) as f64 / kappa;
        state.time = t;
        let v = field.velocity(t, &state, cond)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
        // Clean-estimate extrapolation: Ŷ(0) = X(t) − t·V.
        let clean: Vec<Point3<f64>> = state
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row = v.row(i);
                Point3::new(p.x - t * row[0], p.y - t * row[1], p.z - t * row[2])
            })
            .collect();
        ensure_finite(&clean, k)?;
        let (projected, _, residual) = project_per_view(&clean, &state.view_counts, inputs)?;
        let t_next = (steps - k - 1) as f64 / kappa;
        // Re-noise onto the straight path at t′.
        for (i, p) in state.points.iter_mut().enumerate() {
            let pr = projected[i].coords;
            let n = noise.points[i].coords;
            p.coords = pr * (1.0 - t_next) + n * t_next;
        }
        state.time = t_next;
        if k + 1 == steps {
            last_pre = FlowState {
                points: clean,
                time: 0.0,
                view_counts: state.view_counts.clone(),
            };
            last_residual = residual;
        }
    }
    Ok(ForcedIntegration {
        state,
        pre_projection: last_pre,
        residual: last_residual,
    })
}

/// Argmin of the per-generation rigidity residuals, recomputed from the
/// given (pre-projection) estimates; ties break to the lowest index.
pub fn select_by_rigidity(
    generations: &[FlowState],
    inputs: &[PointCloud],
) -> Result<(usize, Vec<f64>)> {
    assert!(!generations.is_empty());
    let mut residuals = Vec::with_capacity(generations.len());
    for state in generations {
        residuals.push(rigidity_residual(&state.view_clouds(), inputs)?);
    }
    Ok((argmin(&residuals), residuals))
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Per-view optimal rigid transforms mapping the canonical inputs onto the
/// generated registered scene.
pub fn recover_poses(state: &FlowState, inputs: &[PointCloud]) -> Result<Vec<RigidTransform>> {
    let (_, poses, _) = project_per_view(&state.points, &state.view_counts, inputs)?;
    Ok(poses)
}

/// Composes the canonical poses with the canonicalization transforms and
/// undoes the global scaling, producing metric-frame poses and registered
/// dense clouds.
pub fn lift_to_metric(
    poses: &[RigidTransform],
    canon: &CanonicalizedViews,
    dense: &[PointCloud],
) -> Result<(Vec<SimilarityTransform>, Vec<PointCloud>)> {
    if poses.len() != canon.view_transforms.len() || dense.len() != poses.len() {
        return Err(Error::LengthMismatch {
            expected: canon.view_transforms.len(),
            got: poses.len().min(dense.len()),
        });
    }
    let unscale = SimilarityTransform::new(
        canon.global_scale,
        Matrix3::identity(),
        nalgebra::Vector3::zeros(),
    )?;
    let mut metric_poses = Vec::with_capacity(poses.len());
    let mut registered = Vec::with_capacity(poses.len());
    for ((pose, view_transform), cloud) in
        poses.iter().zip(canon.view_transforms.iter()).zip(dense.iter())
    {
        let canonical = pose.after_similarity(view_transform);
        let metric = unscale.compose(&canonical);
        registered.push(metric.apply_cloud(cloud));
        metric_poses.push(metric);
    }
    Ok((metric_poses, registered))
}

/// Full registration output.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Per-view poses in the canonical frame.
    pub canonical_poses: Vec<RigidTransform>,
    /// Per-view metric-frame poses (scale ≈ 1).
    pub metric_poses: Vec<SimilarityTransform>,
    /// The selected generated keypoint scene (canonical frame, t = 0).
    pub generated: FlowState,
    /// Registered dense input clouds in the metric output frame.
    pub registered_views: Vec<PointCloud>,
    /// Rigidity residual of the selected generation (canonical units).
    pub rigidity_residual: f64,
    /// Residuals of all generations, index-aligned with `noise_seeds`.
    pub generation_residuals: Vec<f64>,
    pub selected_generation: usize,
    /// The per-generation noise seeds, for reproducibility.
    pub noise_seeds: Vec<u64>,
    /// The canonicalization used (for lifting and diagnostics).
    pub canonical_scale: f64,
}

/// Registers N unposed views end to end with per-view randomness keyed to
/// the provided per-view seeds (index-derived by [`register`]).
pub fn register_with_seeds(
    views: &[PointCloud],
    params: &Parameters,
    sampler_cfg: &SamplerConfig,
    sampling_cfg: &SamplingConfig,
    view_seeds: &[u64],
) -> Result<RegistrationResult> {
    sampler_cfg.validate()?;
    sampling_cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: views.len(),
        });
    }
    if view_seeds.len() != views.len() {
        return Err(Error::LengthMismatch {
            expected: views.len(),
            got: view_seeds.len(),
        });
    }

    // Per-view preprocessing, keyed to view identity.
    let sampled_results = par::map_range(views.len(), |i| {
        sample_view(&views[i], &sampling_cfg.with_seed(split_seed(view_seeds[i], 1)))
    });
    let mut sampled = Vec::with_capacity(views.len());
    for s in sampled_results {
        sampled.push(s?);
    }

    let rotations: Vec<Matrix3<f64>> = view_seeds
        .iter()
        .map(|&s| random_rotation(&mut stream(split_seed(s, 2))))
        .collect();
    let canon = canonicalize_inputs_with_rotations(&sampled, &rotations)?;
    let descriptors: Vec<_> = sampled.iter().map(|v| v.descriptors.clone()).collect();
    let cond = embed_condition(
        params,
        &canon.normalized_keypoints,
        &descriptors,
        canon.global_scale,
    )?;
    let view_counts: Vec<usize> = sampled.iter().map(|v| v.keypoint_count()).collect();

    // Independent noise per generation, drawn per view so results are stable
    // under view permutation.
    let noise_seeds: Vec<u64> = (0..sampler_cfg.generations)
        .map(|g| split_seed(sampler_cfg.noise_seed, 0xE0 + g as u64))
        .collect();
    let make_noise = |gen_seed: u64| -> FlowState {
        let mut points = Vec::new();
        for (i, &count) in view_counts.iter().enumerate() {
            let mut rng = stream(split_seed(gen_seed, split_seed(view_seeds[i], 4)));
            for _ in 0..count {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                points.push(Point3::new(x, y, z));
            }
        }
        FlowState {
            points,
            time: 1.0,
            view_counts: view_counts.clone(),
        }
    };

    let field = ModelVelocity { params };
    let inputs = &canon.normalized_keypoints;
    let runs = par::map(&noise_seeds, |&gen_seed| -> Result<(FlowState, FlowState, f64)> {
        let noise = make_noise(gen_seed);
        if sampler_cfg.rigidity_forcing {
            let forced =
                rigidity_forcing_integrate(&field, &noise, &cond, inputs, sampler_cfg.steps)?;
            Ok((forced.state, forced.pre_projection, forced.residual))
        } else {
            let state = euler_integrate(&field, &noise, &cond, sampler_cfg.steps)?;
            let residual = rigidity_residual(&state.view_clouds(), inputs)?;
            Ok((state.clone(), state, residual))
        }
    });
    let mut states = Vec::with_capacity(runs.len());
    let mut residuals = Vec::with_capacity(runs.len());
    for r in runs {
        let (state, _pre, residual) = r?;
        states.push(state);
        residuals.push(residual);
    }
    let selected = argmin(&residuals);

    let canonical_poses = recover_poses(&states[selected], inputs)?;
    let (metric_poses, registered_views) = lift_to_metric(&canonical_poses, &canon, views)?;

    Ok(RegistrationResult {
        canonical_poses,
        metric_poses,
        generated: states.into_iter().nth(selected).expect("selected index valid"),
        registered_views,
        rigidity_residual: residuals[selected],
        generation_residuals: residuals,
        selected_generation: selected,
        noise_seeds,
        canonical_scale: canon.global_scale,
    })
}

/// Registers N unposed views end to end; all per-view seeds derive from the
/// sampler's noise seed and the view index.
pub fn register(
    views: &[PointCloud],
    params: &Parameters,
    sampler_cfg: &SamplerConfig,
    sampling_cfg: &SamplingConfig,
) -> Result<RegistrationResult> {
    let view_seeds: Vec<u64> = (0..views.len())
        .map(|i| split_seed(sampler_cfg.noise_seed ^ sampling_cfg.seed, 0xF00 + i as u64))
        .collect();
    register_with_seeds(views, params, sampler_cfg, sampling_cfg, &view_seeds)
}
