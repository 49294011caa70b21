//! Rigid/similarity transform algebra, Kabsch alignment, and registration
//! error metrics.
//!
//! All operations here are pure functions of their inputs; the types are
//! immutable after construction and safe to share across threads.

mod nn;

pub use nn::NearestNeighborGrid;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::par;

/// Relative threshold on the second singular value of the cross-covariance
/// below which rotation about the dominant axis is unobservable.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Tolerance on rotation orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// An ordered list of 3D points in meters; the unit of all registration I/O.
///
/// Invariants: at least one point, every coordinate finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFiniteValue);
        }
        Ok(Self { points })
    }

    pub fn from_xyz<I: IntoIterator<Item = [f64; 3]>>(coords: I) -> Result<Self> {
        Self::new(
            coords
                .into_iter()
                .map(|[x, y, z]| Point3::new(x, y, z))
                .collect(),
        )
    }

    /// Skips the finiteness scan; for internal construction from points that
    /// are already validated or produced by exact arithmetic on valid inputs.
    pub(crate) fn from_points_unchecked(points: Vec<Point3<f64>>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3<f64>> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Longest edge of the axis-aligned bounding box.
    pub fn longest_bbox_edge(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).amax().max(0.0)
    }
}

fn rotation_is_valid(rotation: &Matrix3<f64>) -> bool {
    let gram = rotation.transpose() * rotation;
    let ortho = (gram - Matrix3::identity()).norm();
    ortho <= ROTATION_TOLERANCE && (rotation.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
}

/// An SE(3) pose: rotation then translation, applied as `R·p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1 within
    /// [`ROTATION_TOLERANCE`] (Frobenius).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|c| c.is_finite()) || !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFiniteValue);
        }
        if !rotation_is_valid(&rotation) {
            return Err(Error::DegenerateGeometry(
                "rotation is not orthonormal with det +1".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(rotation_is_valid(&rotation));
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Pointwise `R·p + t`; length preserved.
    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points_unchecked(cloud.iter().map(|p| self.apply_point(p)).collect())
    }

    /// Composition `self ∘ inner`: applying the result equals applying `inner`
    /// first, then `self`.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform::from_parts(
            self.rotation * inner.rotation,
            self.rotation * inner.translation + self.translation,
        )
    }

    /// Composition `self ∘ inner` with a similarity on the inside; the result
    /// applied to any point equals `self(inner(point))`.
    pub fn after_similarity(&self, inner: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform::from_parts(
            inner.scale,
            self.rotation * inner.rotation,
            self.rotation * inner.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation))
    }
}

/// A SIM(3) transform: `scale·R·p + t` with `scale > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::DegenerateScale(scale));
        }
        let rigid = RigidTransform::new(rotation, translation)?;
        Ok(Self {
            scale,
            rotation: rigid.rotation,
            translation: rigid.translation,
        })
    }

    pub(crate) fn from_parts(
        scale: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        debug_assert!(scale > 0.0 && rotation_is_valid(&rotation));
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_rigid(rigid: &RigidTransform) -> Self {
        Self {
            scale: 1.0,
            rotation: rigid.rotation,
            translation: rigid.translation,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    /// Pointwise `scale·R·p + t`; length preserved.
    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::from_points_unchecked(cloud.iter().map(|p| self.apply_point(p)).collect())
    }

    /// Composition `self ∘ inner` of two similarities.
    pub fn compose(&self, inner: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform::from_parts(
            self.scale * inner.scale,
            self.rotation * inner.rotation,
            self.scale * (self.rotation * inner.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_scale = 1.0 / self.scale;
        let rt = self.rotation.transpose();
        SimilarityTransform::from_parts(inv_scale, rt, -(inv_scale * (rt * self.translation)))
    }
}

/// Closed-form least-squares rigid alignment of corresponded point sets.
///
/// Returns the `(R, t)` minimizing `Σ‖R·sᵢ + t − tᵢ‖²` via SVD of the
/// cross-covariance. When the naive solution would be a reflection, the
/// singular vector of the smallest singular value is negated.
///
/// Fails with [`Error::DegenerateGeometry`] when the centered source spans
/// less than a 2D subspace (second singular value ≤ `1e-12 ×` the largest):
/// below that, rotation about the point axis is unobservable.
pub fn kabsch_align(source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: source.len(),
            got: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: source.len(),
        });
    }

    let sc = source.centroid();
    let tc = target.centroid();

    // Cross-covariance H = Σ (sᵢ − s̄)(tᵢ − t̄)ᵀ
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        h += (s - sc) * (t - tc).transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma = svd.singular_values;

    if sigma[1] <= DEGENERACY_THRESHOLD * sigma[0] {
        return Err(Error::DegenerateGeometry(format!(
            "cross-covariance rank < 2 (singular values {:?})",
            [sigma[0], sigma[1], sigma[2]]
        )));
    }

    // R = V·D·Uᵀ with D = diag(1, 1, det(V·Uᵀ)); nalgebra orders singular
    // values descending, so the correction negates the smallest one's vector.
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rotation = v * d * u.transpose();
    let translation = tc.coords - rotation * sc.coords;

    RigidTransform::new(rotation, translation)
}

/// Geodesic rotation distance in degrees:
/// `arccos(clamp((tr(R_gtᵀ·R_est) − 1)/2, −1, 1)) · 180/π`, in `[0, 180]`.
///
/// The clamp absorbs floating-point trace overshoot, which otherwise yields
/// NaN on near-identical orthonormal inputs.
pub fn rotation_error_deg(r_gt: &Matrix3<f64>, r_est: &Matrix3<f64>) -> f64 {
    let cos = ((r_gt.transpose() * r_est).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Euclidean distance between translations, in meters.
pub fn translation_error_m(t_gt: &Vector3<f64>, t_est: &Vector3<f64>) -> f64 {
    (t_gt - t_est).norm()
}

/// Bi-directional root mean squared nearest-neighbor distance:
/// `sqrt(½(mean_A min‖a−b‖² + mean_B min‖b−a‖²))`.
///
/// Nearest neighbors use the grid index, which matches exhaustive search
/// exactly (ties broken by lowest index).
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index_b = NearestNeighborGrid::build(b.points());
    let index_a = NearestNeighborGrid::build(a.points());
    let a_to_b = par::map(a.points(), |p| index_b.nearest(p).1);
    let b_to_a = par::map(b.points(), |p| index_a.nearest(p).1);
    let mean_a = a_to_b.iter().sum::<f64>() / a.len() as f64;
    let mean_b = b_to_a.iter().sum::<f64>() / b.len() as f64;
    Ok((0.5 * (mean_a + mean_b)).sqrt())
}

/// RMS distance between a per-view prediction and its per-view rigid
/// projection onto the inputs' orbit.
///
/// For each view, the optimal rigid map `inputs_i → prediction_i` is found by
/// [`kabsch_align`]; the residual is the RMS over all points of the gap
/// between the prediction and that rigid motion of the inputs.
pub fn rigidity_residual(prediction: &[PointCloud], inputs: &[PointCloud]) -> Result<f64> {
    if prediction.len() != inputs.len() {
        return Err(Error::LengthMismatch {
            expected: inputs.len(),
            got: prediction.len(),
        });
    }
    let mut sum_sq = 0.0;
    let mut total = 0usize;
    for (pred, inp) in prediction.iter().zip(inputs.iter()) {
        if pred.len() != inp.len() {
            return Err(Error::LengthMismatch {
                expected: inp.len(),
                got: pred.len(),
            });
        }
        let pose = kabsch_align(inp, pred)?;
        for (p, q) in pred.iter().zip(inp.iter()) {
            sum_sq += (p - pose.apply_point(q)).norm_squared();
        }
        total += pred.len();
    }
    Ok((sum_sq / total as f64).sqrt())
}
