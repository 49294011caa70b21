//! Training/evaluation sample curation from posed sequences, and synthetic
//! scene generation for desk-scale training.
//!
//! A curated sample is N views with ground-truth view-to-world poses whose
//! world-frame footprints are mutually close (pairwise centers within
//! `max_center_distance`) and form a connected overlap graph at the
//! configured voxel IoU threshold. Inputs are assumed motion-deskewed.

use std::collections::HashSet;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::random_rotation;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::par;
use crate::rng::{split_seed, stream, Stream};

#[derive(Debug, Clone)]
pub struct Frame {
    /// Points in the sensor frame.
    pub cloud: PointCloud,
    /// Sensor-to-world pose.
    pub pose: RigidTransform,
    /// Seconds; strictly increasing along a sequence.
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceData {
    pub id: String,
    frames: Vec<Frame>,
}

impl SequenceData {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput);
        }
        for pair in frames.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::InvalidConfig(
                    "frame timestamps must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self {
            id: id.into(),
            frames,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    /// Keep a frame when this much time passed since the last keyframe…
    pub keyframe_time_threshold: f64,
    /// …or when the sensor moved this far (meters). OR of the two rules.
    pub keyframe_space_threshold: f64,
    /// Samples to attempt per keyframe (β).
    pub samples_per_keyframe: f64,
    /// Attempts per sample before reporting it unsatisfiable.
    pub max_attempts: usize,
    pub min_views: usize,
    pub max_views: usize,
    /// Consecutive keyframes accumulated into one view.
    pub min_frames_per_view: usize,
    pub max_frames_per_view: usize,
    /// Upper bound on pairwise view-center distances (meters).
    pub max_center_distance: f64,
    /// Minimum voxel IoU for an overlap-graph edge.
    pub min_overlap_ratio: f64,
    pub overlap_voxel_size: f64,
    /// Inputs must already be motion-deskewed; this records the assumption.
    pub assume_deskewed: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            keyframe_time_threshold: 0.5,
            keyframe_space_threshold: 2.0,
            samples_per_keyframe: 1.0,
            max_attempts: 10,
            min_views: 2,
            max_views: 4,
            min_frames_per_view: 1,
            max_frames_per_view: 1,
            max_center_distance: 100.0,
            min_overlap_ratio: 0.01,
            overlap_voxel_size: 1.0,
            assume_deskewed: true,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_views >= 2
            && self.max_views >= self.min_views
            && self.min_frames_per_view >= 1
            && self.max_frames_per_view >= self.min_frames_per_view
            && self.max_attempts >= 1
            && (0.0..=1.0).contains(&self.min_overlap_ratio)
            && self.max_center_distance > 0.0
            && self.overlap_voxel_size > 0.0
            && self.keyframe_time_threshold > 0.0
            && self.keyframe_space_threshold > 0.0
            && self.samples_per_keyframe >= 0.0
            && self.assume_deskewed;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "curation config violates its invariants (inputs must be deskewed)".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OverlapEdge {
    pub a: usize,
    pub b: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub sequence_id: String,
    /// Keyframe-index intervals `[start, start + len)` per view; empty for
    /// synthetic scenes.
    pub intervals: Vec<(usize, usize)>,
    pub attempt_seed: u64,
}

/// One multi-view training/evaluation record: views in their own local
/// frames plus the view-to-world poses that register them.
#[derive(Debug, Clone)]
pub struct CurationSample {
    pub views: Vec<PointCloud>,
    pub gt_poses: Vec<RigidTransform>,
    pub overlap_edges: Vec<OverlapEdge>,
    pub provenance: Provenance,
}

impl CurationSample {
    /// Re-verifies the sample invariants from scratch: connectivity at the
    /// overlap threshold and all pairwise center distances within bound.
    pub fn verify(&self, cfg: &CurationConfig) -> Result<()> {
        let world: Vec<PointCloud> = self
            .views
            .iter()
            .zip(self.gt_poses.iter())
            .map(|(v, p)| p.apply_cloud(v))
            .collect();
        let centers: Vec<Point3<f64>> = world.iter().map(|w| w.centroid()).collect();
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let d = (centers[i] - centers[j]).norm();
                if d > cfg.max_center_distance {
                    return Err(Error::InvalidConfig(format!(
                        "views {i} and {j} are {d:.2} m apart, over {}",
                        cfg.max_center_distance
                    )));
                }
            }
        }
        let (connected, _) =
            is_connected(&world, cfg.min_overlap_ratio, cfg.overlap_voxel_size);
        if !connected {
            return Err(Error::InvalidConfig(
                "overlap graph is not connected".into(),
            ));
        }
        Ok(())
    }
}

/// Greedy keyframe selection: keep frame 0, then keep a frame whenever the
/// time OR translation since the last kept frame crosses its threshold.
pub fn select_keyframes(seq: &SequenceData, time_threshold: f64, space_threshold: f64) -> Vec<usize> {
    let frames = seq.frames();
    let mut kept = vec![0];
    let mut last = 0;
    for k in 1..frames.len() {
        let dt = frames[k].timestamp - frames[last].timestamp;
        let ds = (frames[k].pose.translation() - frames[last].pose.translation()).norm();
        if dt >= time_threshold || ds >= space_threshold {
            kept.push(k);
            last = k;
        }
    }
    kept
}

fn voxel_set(cloud: &PointCloud, v: f64) -> HashSet<[i64; 3]> {
    cloud
        .iter()
        .map(|p| {
            [
                (p.x / v).floor() as i64,
                (p.y / v).floor() as i64,
                (p.z / v).floor() as i64,
            ]
        })
        .collect()
}

/// Occupied-voxel intersection over union at voxel size `v`.
pub fn overlap_ratio(a: &PointCloud, b: &PointCloud, v: f64) -> f64 {
    assert!(v > 0.0);
    let va = voxel_set(a, v);
    let vb = voxel_set(b, v);
    let inter = va.intersection(&vb).count();
    let union = va.len() + vb.len() - inter;
    inter as f64 / union as f64
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra] = rb;
        }
    }
}

/// Builds overlap edges at the threshold and checks graph connectivity.
pub fn is_connected(views: &[PointCloud], min_ratio: f64, voxel: f64) -> (bool, Vec<OverlapEdge>) {
    assert!(!views.is_empty());
    let mut edges = Vec::new();
    let mut uf = UnionFind::new(views.len());
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            let ratio = overlap_ratio(&views[i], &views[j], voxel);
            if ratio >= min_ratio {
                edges.push(OverlapEdge { a: i, b: j, ratio });
                uf.union(i, j);
            }
        }
    }
    let root = uf.find(0);
    let connected = (1..views.len()).all(|i| uf.find(i) == root);
    (connected, edges)
}

/// One curation run's outcome: accepted samples plus the indices of samples
/// whose attempt budget was exhausted (reported, not fatal).
#[derive(Debug, Default)]
pub struct CurationOutcome {
    pub samples: Vec<CurationSample>,
    pub exhausted: Vec<usize>,
}

/// Generates training samples from a posed sequence: per sample, draw a view
/// count and disjoint keyframe intervals (contiguous, separated by at least
/// one keyframe), accumulate each interval into a world-frame view, and
/// accept when the center-distance and connectivity checks pass.
///
/// Each accepted view is re-expressed in its middle keyframe's sensor frame;
/// the recorded pose maps that frame back to world.
pub fn generate_samples(
    seq: &SequenceData,
    cfg: &CurationConfig,
    seed: u64,
) -> Result<CurationOutcome> {
    cfg.validate()?;
    let keyframes = select_keyframes(
        seq,
        cfg.keyframe_time_threshold,
        cfg.keyframe_space_threshold,
    );
    let m = keyframes.len();
    let min_needed = cfg.min_views * cfg.min_frames_per_view + (cfg.min_views - 1);
    if m < min_needed {
        return Err(Error::InvalidConfig(format!(
            "sequence has {m} keyframes, need at least {min_needed} for {} disjoint views",
            cfg.min_views
        )));
    }
    let target = (cfg.samples_per_keyframe * m as f64).floor() as usize;
    let mut outcome = CurationOutcome::default();
    for sample_idx in 0..target {
        let mut accepted = None;
        for attempt in 0..cfg.max_attempts {
            let attempt_seed = split_seed(split_seed(seed, sample_idx as u64), attempt as u64);
            if let Some(sample) = try_sample(seq, &keyframes, cfg, attempt_seed)? {
                accepted = Some(sample);
                break;
            }
        }
        match accepted {
            Some(s) => outcome.samples.push(s),
            None => outcome.exhausted.push(sample_idx),
        }
    }
    Ok(outcome)
}

fn try_sample(
    seq: &SequenceData,
    keyframes: &[usize],
    cfg: &CurationConfig,
    attempt_seed: u64,
) -> Result<Option<CurationSample>> {
    let mut rng = stream(attempt_seed);
    let m = keyframes.len();
    let n_views = rng.random_range(cfg.min_views..=cfg.max_views);
    let lengths: Vec<usize> = (0..n_views)
        .map(|_| rng.random_range(cfg.min_frames_per_view..=cfg.max_frames_per_view))
        .collect();
    let total: usize = lengths.iter().sum::<usize>() + (n_views - 1);
    if total > m {
        return Ok(None);
    }
    // Place intervals left to right with ≥1 keyframe between them; the highest
    // interval start offset still available is `slack`.
    let slack = m - total;
    let mut offsets: Vec<usize> = (0..n_views).map(|_| rng.random_range(0..=slack)).collect();
    offsets.sort_unstable();

    let mut views_world = Vec::with_capacity(n_views);
    let mut intervals = Vec::with_capacity(n_views);
    let mut cursor = 0usize;
    for (j, &len) in lengths.iter().enumerate() {
        let start = offsets[j] + cursor;
        cursor += len + 1;
        let mut pts = Vec::new();
        for &kf in &keyframes[start..start + len] {
            let frame = &seq.frames()[kf];
            pts.extend(frame.cloud.iter().map(|p| frame.pose.apply_point(p)));
        }
        views_world.push(PointCloud::from_points_unchecked(pts));
        intervals.push((start, len));
    }

    let centers: Vec<Point3<f64>> = views_world.iter().map(|v| v.centroid()).collect();
    for i in 0..n_views {
        for j in i + 1..n_views {
            if (centers[i] - centers[j]).norm() > cfg.max_center_distance {
                return Ok(None);
            }
        }
    }
    let (connected, edges) = is_connected(
        &views_world,
        cfg.min_overlap_ratio,
        cfg.overlap_voxel_size,
    );
    if !connected {
        return Ok(None);
    }

    // Express each view in its middle keyframe's sensor frame.
    let mut views = Vec::with_capacity(n_views);
    let mut gt_poses = Vec::with_capacity(n_views);
    for (j, &(start, len)) in intervals.iter().enumerate() {
        let middle_kf = keyframes[start + (len - 1) / 2];
        let pose = seq.frames()[middle_kf].pose.clone();
        let inv = pose.inverse();
        views.push(inv.apply_cloud(&views_world[j]));
        gt_poses.push(pose);
    }

    Ok(Some(CurationSample {
        views,
        gt_poses,
        overlap_edges: edges,
        provenance: Provenance {
            sequence_id: seq.id.clone(),
            intervals,
            attempt_seed,
        },
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Overall scene extent in meters.
    pub extent: f64,
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Total surface samples across the scene.
    pub min_points: usize,
    pub max_points: usize,
    /// Spherical-cap half-angle range for view crops, degrees.
    pub min_cap_half_angle_deg: f64,
    pub max_cap_half_angle_deg: f64,
    /// Minimum voxel IoU enforced between consecutive views.
    pub min_overlap_ratio: f64,
    pub overlap_voxel_size: f64,
    pub max_center_distance: f64,
    /// Minimum points per cropped view.
    pub min_view_points: usize,
    pub max_retries: usize,
    /// Primitive size range as a fraction of the scene extent.
    pub min_primitive_frac: f64,
    pub max_primitive_frac: f64,
    /// Relative probability of plane primitives (boxes and spheres share the
    /// rest); large planes make featureless patches, so keep this small when
    /// local descriptors must discriminate.
    pub plane_weight: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 10.0,
            min_primitives: 5,
            max_primitives: 20,
            min_points: 5_000,
            max_points: 50_000,
            min_cap_half_angle_deg: 70.0,
            max_cap_half_angle_deg: 110.0,
            min_overlap_ratio: 0.3,
            overlap_voxel_size: 0.5,
            max_center_distance: 100.0,
            min_view_points: 500,
            max_retries: 20,
            min_primitive_frac: 0.03,
            max_primitive_frac: 0.15,
            plane_weight: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.extent > 0.0
            && self.min_primitives >= 1
            && self.max_primitives >= self.min_primitives
            && self.min_points >= 100
            && self.max_points >= self.min_points
            && self.min_cap_half_angle_deg > 0.0
            && self.max_cap_half_angle_deg >= self.min_cap_half_angle_deg
            && self.max_cap_half_angle_deg <= 180.0
            && (0.0..=1.0).contains(&self.min_overlap_ratio)
            && self.overlap_voxel_size > 0.0
            && self.max_retries >= 1
            && self.min_view_points >= 10
            && self.min_primitive_frac > 0.0
            && self.max_primitive_frac >= self.min_primitive_frac
            && (0.0..=1.0).contains(&self.plane_weight);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "scene config violates its invariants".into(),
            ))
        }
    }

    pub fn curation_checks(&self) -> CurationConfig {
        CurationConfig {
            min_overlap_ratio: self.min_overlap_ratio,
            overlap_voxel_size: self.overlap_voxel_size,
            max_center_distance: self.max_center_distance,
            ..CurationConfig::default()
        }
    }
}

enum Primitive {
    Box {
        center: Vector3<f64>,
        half: Vector3<f64>,
        rot: Matrix3<f64>,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Plane {
        center: Vector3<f64>,
        half_u: f64,
        half_v: f64,
        rot: Matrix3<f64>,
    },
}

impl Primitive {
    fn sample_point(&self, rng: &mut Stream) -> Point3<f64> {
        match self {
            Primitive::Box { center, half, rot } => {
                // Face areas weight the face choice.
                let areas = [
                    half.y * half.z,
                    half.y * half.z,
                    half.x * half.z,
                    half.x * half.z,
                    half.x * half.y,
                    half.x * half.y,
                ];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                for (i, &a) in areas.iter().enumerate() {
                    if pick < a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                let local = match face {
                    0 => Vector3::new(half.x, u * half.y, v * half.z),
                    1 => Vector3::new(-half.x, u * half.y, v * half.z),
                    2 => Vector3::new(u * half.x, half.y, v * half.z),
                    3 => Vector3::new(u * half.x, -half.y, v * half.z),
                    4 => Vector3::new(u * half.x, v * half.y, half.z),
                    _ => Vector3::new(u * half.x, v * half.y, -half.z),
                };
                Point3::from(rot * local + center)
            }
            Primitive::Sphere { center, radius } => {
                // Uniform direction via normalized Gaussian.
                use rand_distr::{Distribution, StandardNormal};
                let d = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                );
                let d = if d.norm() > 1e-12 {
                    d.normalize()
                } else {
                    Vector3::x()
                };
                Point3::from(center + d * *radius)
            }
            Primitive::Plane {
                center,
                half_u,
                half_v,
                rot,
            } => {
                let u = rng.random_range(-1.0..1.0) * *half_u;
                let v = rng.random_range(-1.0..1.0) * *half_v;
                Point3::from(rot * Vector3::new(u, v, 0.0) + center)
            }
        }
    }
}

fn random_primitive(rng: &mut Stream, cfg: &SceneConfig) -> Primitive {
    let extent = cfg.extent;
    let center = Vector3::new(
        rng.random_range(-0.4..0.4) * extent,
        rng.random_range(-0.4..0.4) * extent,
        rng.random_range(-0.2..0.2) * extent,
    );
    let size = || -> (f64, f64) { (cfg.min_primitive_frac, cfg.max_primitive_frac) };
    let (lo, hi) = size();
    if rng.random_range(0.0..1.0) < cfg.plane_weight {
        return Primitive::Plane {
            center,
            half_u: rng.random_range(lo..hi) * extent,
            half_v: rng.random_range(lo..hi) * extent,
            rot: random_rotation(rng),
        };
    }
    if rng.random_range(0..2) == 0 {
        Primitive::Box {
            center,
            half: Vector3::new(
                rng.random_range(lo..hi) * extent,
                rng.random_range(lo..hi) * extent,
                rng.random_range(lo..hi) * extent,
            ),
            rot: random_rotation(rng),
        }
    } else {
        Primitive::Sphere {
            center,
            radius: rng.random_range(lo..hi) * extent,
        }
    }
}

/// Builds one synthetic multi-view sample: a primitive scene surface-sampled
/// into a master cloud, cropped into `n_views` wide spherical caps around
/// random directions, each view re-expressed in its own random local frame.
pub fn generate_synthetic_scene(
    seed: u64,
    n_views: usize,
    cfg: &SceneConfig,
) -> Result<CurationSample> {
    cfg.validate()?;
    if n_views < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: n_views,
        });
    }
    for retry in 0..cfg.max_retries {
        let attempt_seed = split_seed(seed, 0x5C_0000 + retry as u64);
        if let Some(sample) = try_synthetic_scene(attempt_seed, n_views, cfg) {
            return Ok(sample);
        }
    }
    Err(Error::RetryExhausted {
        attempts: cfg.max_retries,
    })
}

fn try_synthetic_scene(seed: u64, n_views: usize, cfg: &SceneConfig) -> Option<CurationSample> {
    let mut rng = stream(seed);
    let n_prims = rng.random_range(cfg.min_primitives..=cfg.max_primitives);
    let primitives: Vec<Primitive> = (0..n_prims)
        .map(|_| random_primitive(&mut rng, cfg))
        .collect();
    let total_points = rng.random_range(cfg.min_points..=cfg.max_points);
    let per_prim = (total_points / n_prims).max(1);
    let mut master = Vec::with_capacity(per_prim * n_prims);
    for prim in &primitives {
        for _ in 0..per_prim {
            master.push(prim.sample_point(&mut rng));
        }
    }
    let scene_center = {
        let sum = master.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / master.len() as f64)
    };

    // Wide caps around random directions guarantee seed overlap; the voxel
    // IoU check below enforces it.
    let mut views_world: Vec<PointCloud> = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let axis = {
            use rand_distr::{Distribution, StandardNormal};
            let d = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            if d.norm() > 1e-12 {
                d.normalize()
            } else {
                Vector3::x()
            }
        };
        let half_angle = rng
            .random_range(cfg.min_cap_half_angle_deg..=cfg.max_cap_half_angle_deg)
            .to_radians();
        let cos_min = half_angle.cos();
        let pts: Vec<Point3<f64>> = master
            .iter()
            .filter(|p| {
                let d = *p - scene_center;
                let n = d.norm();
                n < 1e-12 || d.dot(&axis) / n >= cos_min
            })
            .cloned()
            .collect();
        if pts.len() < cfg.min_view_points {
            return None;
        }
        views_world.push(PointCloud::from_points_unchecked(pts));
    }

    for pair in views_world.windows(2) {
        if overlap_ratio(&pair[0], &pair[1], cfg.overlap_voxel_size) < cfg.min_overlap_ratio {
            return None;
        }
    }
    let (connected, edges) = is_connected(
        &views_world,
        cfg.min_overlap_ratio,
        cfg.overlap_voxel_size,
    );
    if !connected {
        return None;
    }

    let mut views = Vec::with_capacity(n_views);
    let mut gt_poses = Vec::with_capacity(n_views);
    for world in &views_world {
        let rot = random_rotation(&mut rng);
        let centroid = world.centroid();
        // gt pose maps the local frame back to world: world = R·local + c.
        let pose = RigidTransform::from_parts(rot, centroid.coords);
        let inv = pose.inverse();
        views.push(inv.apply_cloud(world));
        gt_poses.push(pose);
    }

    Some(CurationSample {
        views,
        gt_poses,
        overlap_edges: edges,
        provenance: Provenance {
            sequence_id: format!("synthetic-{seed:016x}"),
            intervals: Vec::new(),
            attempt_seed: seed,
        },
    })
}

/// Generates `count` synthetic samples with view counts drawn uniformly from
/// `views` (inclusive range), in parallel, deterministically from `seed`.
pub fn generate_synthetic_dataset(
    count: usize,
    views: (usize, usize),
    cfg: &SceneConfig,
    seed: u64,
) -> Result<Vec<CurationSample>> {
    let results = par::map_range(count, |i| {
        let scene_seed = split_seed(seed, i as u64);
        let n_views = stream(split_seed(scene_seed, 7)).random_range(views.0..=views.1);
        generate_synthetic_scene(scene_seed, n_views, cfg)
    });
    results.into_iter().collect()
}
