//! Mapping views and training targets into the shared similarity-invariant
//! unit-cube frame.
//!
//! Per view: subtract the keypoint centroid, scale by the inverse of the
//! global scale (the longest bounding-box edge of the largest view), then
//! apply an independent uniform random rotation. The training target is the
//! ground-truth-registered keypoint merge, recentered, rotated by the
//! reference view's rotation, and scaled the same way — so each view of the
//! target is an exact rigid motion of that view's canonical input.

use nalgebra::{Matrix3, Point3, Quaternion, UnitQuaternion, Vector3};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, SimilarityTransform};
use crate::rng::Stream;
use crate::sampling::SampledView;

/// Below this bounding-box edge the global scale is considered degenerate.
pub const MIN_SCALE: f64 = 1e-9;

/// All views mapped into the canonical frame, with the transforms to undo it.
#[derive(Debug, Clone)]
pub struct CanonicalizedViews {
    /// Canonical keypoints per view.
    pub normalized_keypoints: Vec<PointCloud>,
    /// Per-view similarity transforms mapping raw keypoints to canonical.
    pub view_transforms: Vec<SimilarityTransform>,
    /// Longest bounding-box edge of the largest view, in meters.
    pub global_scale: f64,
    /// Index of the view with the most keypoints (ties → lowest index).
    pub reference_view: usize,
    /// The random rotation drawn for the reference view.
    pub reference_rotation: Matrix3<f64>,
}

/// A point set in transit along the flow, tagged with its per-view layout.
///
/// Points are stored view-major: the first `view_counts[0]` rows belong to
/// view 0, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub points: Vec<Point3<f64>>,
    /// Flow time in `[0, 1]`; 1 is noise, 0 is the registered scene.
    pub time: f64,
    pub view_counts: Vec<usize>,
}

impl FlowState {
    pub fn new(points: Vec<Point3<f64>>, time: f64, view_counts: Vec<usize>) -> Result<Self> {
        if view_counts.iter().sum::<usize>() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "view counts sum to {}, but there are {} points",
                view_counts.iter().sum::<usize>(),
                points.len()
            )));
        }
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::ShapeMismatch(format!("time {time} outside [0, 1]")));
        }
        if points
            .iter()
            .any(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFiniteValue);
        }
        Ok(Self {
            points,
            time,
            view_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-view slices of the point list, in view order.
    pub fn view_slices(&self) -> Vec<&[Point3<f64>]> {
        let mut out = Vec::with_capacity(self.view_counts.len());
        let mut offset = 0;
        for &count in &self.view_counts {
            out.push(&self.points[offset..offset + count]);
            offset += count;
        }
        out
    }

    /// Per-view point clouds, in view order.
    pub fn view_clouds(&self) -> Vec<PointCloud> {
        self.view_slices()
            .into_iter()
            .map(|s| PointCloud::from_points_unchecked(s.to_vec()))
            .collect()
    }

    /// View id of each point, in point order.
    pub fn point_view_ids(&self) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.len());
        for (v, &count) in self.view_counts.iter().enumerate() {
            ids.extend(std::iter::repeat(v as u32).take(count));
        }
        ids
    }
}

/// Uniform rotation on SO(3) via a normalized 4D Gaussian quaternion.
pub fn random_rotation(rng: &mut Stream) -> Matrix3<f64> {
    let w: f64 = StandardNormal.sample(rng);
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner()
}

/// Canonicalizes input views: center each view's keypoints, scale all views
/// by the inverse of the largest view's longest bounding-box edge, and apply
/// an independent random rotation per view (drawn in view order).
pub fn canonicalize_inputs(views: &[SampledView], rng: &mut Stream) -> Result<CanonicalizedViews> {
    let rotations: Vec<Matrix3<f64>> = views.iter().map(|_| random_rotation(rng)).collect();
    canonicalize_inputs_with_rotations(views, &rotations)
}

/// Canonicalization core with explicitly supplied per-view rotations; used by
/// inference paths that key randomness to view identity rather than order.
pub fn canonicalize_inputs_with_rotations(
    views: &[SampledView],
    rotations: &[Matrix3<f64>],
) -> Result<CanonicalizedViews> {
    if views.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: views.len(),
        });
    }
    if rotations.len() != views.len() {
        return Err(Error::LengthMismatch {
            expected: views.len(),
            got: rotations.len(),
        });
    }
    for v in views {
        if v.keypoint_count() < 3 {
            return Err(Error::TooFewPoints {
                needed: 3,
                got: v.keypoint_count(),
            });
        }
    }

    let reference_view = views
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.keypoint_count()
                .cmp(&b.keypoint_count())
                .then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("at least two views");

    let scale = views[reference_view].keypoints.longest_bbox_edge();
    if scale < MIN_SCALE {
        return Err(Error::DegenerateScale(scale));
    }
    let inv_scale = 1.0 / scale;

    let mut normalized = Vec::with_capacity(views.len());
    let mut transforms = Vec::with_capacity(views.len());
    for (view, &rotation) in views.iter().zip(rotations.iter()) {
        let centroid = view.keypoints.centroid();
        // T̄(p) = (1/s)·R·(p − c)
        let transform = SimilarityTransform::from_parts(
            inv_scale,
            rotation,
            -(rotation * centroid.coords) * inv_scale,
        );
        normalized.push(transform.apply_cloud(&view.keypoints));
        transforms.push(transform);
    }
    let reference_rotation = rotations[reference_view];

    Ok(CanonicalizedViews {
        normalized_keypoints: normalized,
        view_transforms: transforms,
        global_scale: scale,
        reference_view,
        reference_rotation,
    })
}

/// Builds the canonical registration target: transform each view's keypoints
/// by its ground-truth pose, merge view-major, recenter the merge at the
/// origin, rotate by the reference view's rotation, and scale by the inverse
/// global scale.
pub fn canonicalize_target(
    views: &[SampledView],
    gt_poses: &[RigidTransform],
    canon: &CanonicalizedViews,
) -> Result<FlowState> {
    if gt_poses.len() != views.len() {
        return Err(Error::LengthMismatch {
            expected: views.len(),
            got: gt_poses.len(),
        });
    }
    let mut merged: Vec<Point3<f64>> = Vec::new();
    let mut view_counts = Vec::with_capacity(views.len());
    for (view, pose) in views.iter().zip(gt_poses.iter()) {
        merged.extend(view.keypoints.iter().map(|p| pose.apply_point(p)));
        view_counts.push(view.keypoint_count());
    }
    let centroid =
        merged.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / merged.len() as f64;
    let inv_scale = 1.0 / canon.global_scale;
    let rot = canon.reference_rotation;
    let points: Vec<Point3<f64>> = merged
        .into_iter()
        .map(|p| Point3::from(rot * (p.coords - centroid) * inv_scale))
        .collect();
    FlowState::new(points, 0.0, view_counts)
}
