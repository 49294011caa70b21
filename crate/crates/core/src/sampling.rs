//! Per-view preprocessing: voxel downsampling, outlier removal, coverage
//! counting, farthest point sampling, and patch descriptors.
//!
//! Every step is deterministic given the config seed; per-keypoint work is
//! safe to run in parallel because each patch derives its own child seed.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NearestNeighborGrid, PointCloud};
use crate::par;
use crate::rng::{split_seed, stream};

/// Descriptor width produced by [`GeometricDescriptor`].
pub const GEOMETRIC_DESCRIPTOR_DIM: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Voxel size for downsampling (meters).
    pub voxel_size_downsample: f64,
    /// Voxel size for coverage counting (meters).
    pub voxel_size_coverage: f64,
    /// Keypoints per occupied coverage voxel.
    pub fps_density_ratio: f64,
    /// Patch radius in meters; `None` means `20 × voxel_size_downsample`.
    pub patch_radius: Option<f64>,
    pub max_patch_points: usize,
    pub outlier_neighbors: usize,
    pub outlier_std_ratio: f64,
    pub descriptor_dim: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            voxel_size_downsample: 0.25,
            voxel_size_coverage: 0.25,
            fps_density_ratio: 0.2,
            patch_radius: None,
            max_patch_points: 512,
            outlier_neighbors: 20,
            outlier_std_ratio: 2.0,
            descriptor_dim: GEOMETRIC_DESCRIPTOR_DIM,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn effective_patch_radius(&self) -> f64 {
        self.patch_radius
            .unwrap_or(20.0 * self.voxel_size_downsample)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.voxel_size_downsample > 0.0
            && self.voxel_size_coverage > 0.0
            && self.fps_density_ratio > 0.0
            && self.fps_density_ratio <= 1.0
            && self.effective_patch_radius() > 0.0
            && self.max_patch_points >= 8
            && self.outlier_neighbors >= 1
            && self.descriptor_dim >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "sampling config violates its invariants".into(),
            ))
        }
    }

    /// Copy with the seed replaced; used to derive per-view configs.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// One view reduced to keypoints with local descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledView {
    /// Selected keypoints (K ≥ 3).
    pub keypoints: PointCloud,
    /// K × D descriptor matrix, rows aligned with `keypoints`.
    pub descriptors: DMatrix<f64>,
    /// The downsampled, outlier-filtered cloud the keypoints came from.
    pub source_reduced: PointCloud,
    /// Indices of the keypoints within `source_reduced`.
    pub keypoint_indices: Vec<usize>,
}

impl SampledView {
    pub fn keypoint_count(&self) -> usize {
        self.keypoints.len()
    }
}

fn voxel_key(p: &Point3<f64>, v: f64) -> [i64; 3] {
    [
        (p.x / v).floor() as i64,
        (p.y / v).floor() as i64,
        (p.z / v).floor() as i64,
    ]
}

/// One output point per occupied voxel, equal to the centroid of the points
/// in that voxel. Output is ordered by ascending lexicographic voxel index.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let mut voxels: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for p in cloud.iter() {
        let entry = voxels
            .entry(voxel_key(p, voxel_size))
            .or_insert((Vector3::zeros(), 0));
        entry.0 += p.coords;
        entry.1 += 1;
    }
    PointCloud::from_points_unchecked(
        voxels
            .into_values()
            .map(|(sum, count)| Point3::from(sum / count as f64))
            .collect(),
    )
}

/// Number of occupied voxels at size `voxel_size`.
pub fn coverage_count(cloud: &PointCloud, voxel_size: f64) -> usize {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    let mut keys: Vec<[i64; 3]> = cloud.iter().map(|p| voxel_key(p, voxel_size)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Drops points whose mean distance to their `k` nearest neighbors exceeds
/// the global mean plus `std_ratio` standard deviations. Survivor order is
/// the input order.
pub fn remove_statistical_outliers(
    cloud: &PointCloud,
    k: usize,
    std_ratio: f64,
) -> Result<PointCloud> {
    assert!(k >= 1);
    if cloud.len() <= k {
        return Err(Error::TooFewPoints {
            needed: k + 1,
            got: cloud.len(),
        });
    }
    let grid = NearestNeighborGrid::build(cloud.points());
    let mean_dists = par::map_range(cloud.len(), |i| {
        let neighbors = grid.k_nearest(&cloud.points()[i], k, Some(i as u32));
        neighbors.iter().map(|&(_, d2)| d2.sqrt()).sum::<f64>() / k as f64
    });
    let n = mean_dists.len() as f64;
    let mean = mean_dists.iter().sum::<f64>() / n;
    let var = mean_dists
        .iter()
        .map(|d| (d - mean) * (d - mean))
        .sum::<f64>()
        / n;
    let threshold = mean + std_ratio * var.sqrt();
    let survivors: Vec<Point3<f64>> = cloud
        .iter()
        .zip(mean_dists.iter())
        .filter(|(_, &d)| d <= threshold)
        .map(|(p, _)| *p)
        .collect();
    PointCloud::new(survivors)
}

/// Keypoint budget from the coverage count: `floor(alpha_s · coverage)`,
/// clamped below by 3 and above by the reduced cloud size.
pub fn keypoint_count(coverage: usize, alpha_s: f64, reduced_len: usize) -> Result<usize> {
    if reduced_len < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: reduced_len,
        });
    }
    let raw = (alpha_s * coverage as f64).floor() as usize;
    Ok(raw.max(3).min(reduced_len))
}

/// Greedy farthest point sampling with a seeded uniform first index.
///
/// Each subsequent index maximizes the minimum distance to the points already
/// selected; ties break to the lowest index. Deterministic given
/// `(cloud, k, seed)`.
pub fn farthest_point_sampling(cloud: &PointCloud, k: usize, seed: u64) -> Vec<usize> {
    assert!(k >= 1 && k <= cloud.len());
    let first = stream(seed).random_range(0..cloud.len());
    farthest_point_sampling_from(cloud, k, first)
}

/// Farthest point sampling with an explicitly pinned first index.
pub fn farthest_point_sampling_from(cloud: &PointCloud, k: usize, first: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= cloud.len());
    assert!(first < cloud.len());
    let points = cloud.points();
    let mut selected = Vec::with_capacity(k);
    selected.push(first);
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| (p - points[first]).norm_squared())
        .collect();
    while selected.len() < k {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best = i;
                best_d2 = d2;
            }
        }
        selected.push(best);
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let cand = (points[i] - points[best]).norm_squared();
            if cand < *d2 {
                *d2 = cand;
            }
        }
    }
    selected
}

/// All points of `reduced` within `radius` of `center`, re-expressed with
/// `center` at the origin and scaled by `1/radius` so the patch fits the unit
/// ball. Patches larger than `max_points` are uniformly subsampled with the
/// seeded generator; point order is ascending source index.
pub fn ball_query_patch(
    reduced: &PointCloud,
    center: &Point3<f64>,
    radius: f64,
    max_points: usize,
    seed: u64,
) -> Result<PointCloud> {
    let grid = NearestNeighborGrid::build(reduced.points());
    ball_query_patch_with_grid(&grid, reduced, center, radius, max_points, seed)
}

fn ball_query_patch_with_grid(
    grid: &NearestNeighborGrid<'_>,
    reduced: &PointCloud,
    center: &Point3<f64>,
    radius: f64,
    max_points: usize,
    seed: u64,
) -> Result<PointCloud> {
    assert!(radius > 0.0);
    let mut hits = grid.within_radius(center, radius);
    if hits.is_empty() {
        return Err(Error::EmptyPatch);
    }
    if hits.len() > max_points {
        let mut rng = stream(seed);
        let mut chosen = rand::seq::index::sample(&mut rng, hits.len(), max_points).into_vec();
        chosen.sort_unstable();
        hits = chosen.into_iter().map(|i| hits[i]).collect();
    }
    let inv_r = 1.0 / radius;
    Ok(PointCloud::from_points_unchecked(
        hits.into_iter()
            .map(|i| Point3::from((reduced.points()[i] - center) * inv_r))
            .collect(),
    ))
}

/// Produces a fixed-width descriptor for a patch normalized to the unit ball.
pub trait PatchDescriptor: Send + Sync {
    fn dim(&self) -> usize;
    fn describe(&self, patch: &PointCloud) -> Result<Vec<f64>>;
}

/// Rotation- and reflection-invariant handcrafted descriptor (D = 32).
///
/// Concatenates four L1-normalized blocks computed from orthogonal-invariant
/// statistics of the patch:
/// 1. 16-bin histogram of radial distances in `[0, 1]`,
/// 2. 8-bin histogram of distances from the points to the patch centroid,
/// 3. the 3 sorted eigenvalues of the patch covariance, normalized by their
///    sum (uniform `(1/3, 1/3, 1/3)` fallback when the sum vanishes),
/// 4. 5 moments of the radial distribution: mean, std, skew, min, max.
#[derive(Debug, Clone, Default)]
pub struct GeometricDescriptor;

fn l1_normalize(block: &mut [f64]) {
    let total: f64 = block.iter().map(|x| x.abs()).sum();
    if total > 1e-300 {
        for x in block.iter_mut() {
            *x /= total;
        }
    }
}

impl PatchDescriptor for GeometricDescriptor {
    fn dim(&self) -> usize {
        GEOMETRIC_DESCRIPTOR_DIM
    }

    fn describe(&self, patch: &PointCloud) -> Result<Vec<f64>> {
        if patch.is_empty() {
            return Err(Error::EmptyPatch);
        }
        let n = patch.len() as f64;
        let radii: Vec<f64> = patch.iter().map(|p| p.coords.norm()).collect();

        // Block 1: radial histogram over [0, 1].
        let mut radial_hist = [0.0f64; 16];
        for &r in &radii {
            let bin = ((r * 16.0).floor() as usize).min(15);
            radial_hist[bin] += 1.0;
        }
        l1_normalize(&mut radial_hist);

        // Block 2: histogram of distances to the patch centroid over [0, 2].
        let centroid = patch.centroid();
        let mut centroid_hist = [0.0f64; 8];
        for p in patch.iter() {
            let d = (p - centroid).norm();
            let bin = ((d / 2.0 * 8.0).floor() as usize).min(7);
            centroid_hist[bin] += 1.0;
        }
        l1_normalize(&mut centroid_hist);

        // Block 3: sorted covariance eigenvalues normalized by their sum.
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        for p in patch.iter() {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        cov /= n;
        let mut eigs: Vec<f64> = cov
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|&e| e.max(0.0))
            .collect();
        eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let eig_sum: f64 = eigs.iter().sum();
        let mut eig_block = if eig_sum > 1e-300 {
            [eigs[0] / eig_sum, eigs[1] / eig_sum, eigs[2] / eig_sum]
        } else {
            [1.0 / 3.0; 3]
        };
        l1_normalize(&mut eig_block);

        // Block 4: moments of the radial distribution.
        let mean = radii.iter().sum::<f64>() / n;
        let var = radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let skew = if std > 1e-12 {
            radii
                .iter()
                .map(|r| {
                    let z = (r - mean) / std;
                    z * z * z
                })
                .sum::<f64>()
                / n
        } else {
            0.0
        };
        let min = radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = radii.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut moments = [mean, std, skew, min, max];
        l1_normalize(&mut moments);

        let mut out = Vec::with_capacity(GEOMETRIC_DESCRIPTOR_DIM);
        out.extend_from_slice(&radial_hist);
        out.extend_from_slice(&centroid_hist);
        out.extend_from_slice(&eig_block);
        out.extend_from_slice(&moments);
        Ok(out)
    }
}

/// Runs the full per-view pipeline: downsample, outlier removal, coverage
/// count, keypoint budget, FPS, and per-keypoint patch descriptors.
/// Deterministic given `cfg.seed`.
pub fn sample_view(cloud: &PointCloud, cfg: &SamplingConfig) -> Result<SampledView> {
    sample_view_with(cloud, cfg, &GeometricDescriptor)
}

pub fn sample_view_with(
    cloud: &PointCloud,
    cfg: &SamplingConfig,
    descriptor: &dyn PatchDescriptor,
) -> Result<SampledView> {
    cfg.validate()?;
    if descriptor.dim() != cfg.descriptor_dim {
        return Err(Error::InvalidConfig(format!(
            "descriptor dim {} does not match configured dim {}",
            descriptor.dim(),
            cfg.descriptor_dim
        )));
    }
    let down = voxel_downsample(cloud, cfg.voxel_size_downsample);
    let reduced = remove_statistical_outliers(&down, cfg.outlier_neighbors, cfg.outlier_std_ratio)?;
    let coverage = coverage_count(&reduced, cfg.voxel_size_coverage);
    let k = keypoint_count(coverage, cfg.fps_density_ratio, reduced.len())?;
    let indices = farthest_point_sampling(&reduced, k, split_seed(cfg.seed, 1));
    sample_view_from_keypoints(&reduced, indices, cfg, descriptor)
}

/// Descriptor stage shared by [`sample_view_with`] and tests that pin the FPS
/// first index explicitly.
pub fn sample_view_from_keypoints(
    reduced: &PointCloud,
    keypoint_indices: Vec<usize>,
    cfg: &SamplingConfig,
    descriptor: &dyn PatchDescriptor,
) -> Result<SampledView> {
    let radius = cfg.effective_patch_radius();
    let grid = NearestNeighborGrid::build(reduced.points());
    let patch_root = split_seed(cfg.seed, 2);
    let rows = par::map_range(keypoint_indices.len(), |slot| {
        let center = reduced.points()[keypoint_indices[slot]];
        let patch = ball_query_patch_with_grid(
            &grid,
            reduced,
            &center,
            radius,
            cfg.max_patch_points,
            split_seed(patch_root, slot as u64),
        )?;
        descriptor.describe(&patch)
    });
    let mut descriptors = DMatrix::zeros(keypoint_indices.len(), cfg.descriptor_dim);
    for (slot, row) in rows.into_iter().enumerate() {
        let row = row?;
        if row.len() != cfg.descriptor_dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor returned {} values, expected {}",
                row.len(),
                cfg.descriptor_dim
            )));
        }
        for (j, v) in row.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue);
            }
            descriptors[(slot, j)] = v;
        }
    }
    let keypoints = PointCloud::from_points_unchecked(
        keypoint_indices
            .iter()
            .map(|&i| reduced.points()[i])
            .collect(),
    );
    Ok(SampledView {
        keypoints,
        descriptors,
        source_reduced: reduced.clone(),
        keypoint_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_downsample_single_point_and_shared_voxel() {
        let single = PointCloud::from_xyz([[0.3, 0.4, 0.5]]).unwrap();
        let out = voxel_downsample(&single, 1.0);
        assert_eq!(out.points()[0], Point3::new(0.3, 0.4, 0.5));

        let pair = PointCloud::from_xyz([[0.1, 0.0, 0.0], [0.3, 0.0, 0.0]]).unwrap();
        let out = voxel_downsample(&pair, 1.0);
        assert_eq!(out.len(), 1);
        assert!((out.points()[0].x - 0.2).abs() < 1e-15);
    }

    #[test]
    fn coverage_count_examples() {
        let one = PointCloud::from_xyz([[0.2, 0.2, 0.2]]).unwrap();
        assert_eq!(coverage_count(&one, 1.0), 1);
        let two = PointCloud::from_xyz([[0.2, 0.2, 0.2], [0.7, 0.7, 0.7]]).unwrap();
        assert_eq!(coverage_count(&two, 1.0), 1);
    }

    #[test]
    fn keypoint_count_formula_and_clamps() {
        assert_eq!(keypoint_count(1000, 0.2, 10_000).unwrap(), 200);
        assert_eq!(keypoint_count(10, 0.05, 10).unwrap(), 3);
        assert_eq!(keypoint_count(7, 1.0, 7).unwrap(), 7);
        assert!(matches!(
            keypoint_count(10, 0.5, 2),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn fps_covers_all_indices_when_k_equals_n() {
        let cloud = PointCloud::from_xyz([
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [3.0, 3.0, 0.0],
        ])
        .unwrap();
        let mut order = farthest_point_sampling(&cloud, 4, 9);
        order.sort_unstable();
        assert_eq!(order, vec![0, 1, 2, 3]);

        let first_only = farthest_point_sampling(&cloud, 1, 9);
        assert_eq!(first_only.len(), 1);
        assert_eq!(first_only, farthest_point_sampling(&cloud, 1, 9));
    }

    #[test]
    fn outlier_removal_keeps_tight_cluster_and_drops_lone_point() {
        // Evenly spaced ring: every point sees the same neighbor distances,
        // so nothing can sit beyond mean + ratio·std.
        let mut pts: Vec<[f64; 3]> = Vec::new();
        for i in 0..50 {
            let a = i as f64 / 50.0 * std::f64::consts::TAU;
            pts.push([a.sin() * 0.5, a.cos() * 0.5, 0.0]);
        }
        let tight = PointCloud::from_xyz(pts.clone()).unwrap();
        let kept = remove_statistical_outliers(&tight, 5, 2.0).unwrap();
        assert_eq!(kept.len(), 50, "tight cluster should survive intact");

        pts.push([100.0, 0.0, 0.0]);
        let with_outlier = PointCloud::from_xyz(pts).unwrap();
        let kept = remove_statistical_outliers(&with_outlier, 5, 2.0).unwrap();
        assert_eq!(kept.len(), 50);
        assert!(kept.iter().all(|p| p.x < 50.0));

        let tiny = PointCloud::from_xyz([[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            remove_statistical_outliers(&tiny, 5, 2.0),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn ball_query_patch_normalizes_into_unit_ball() {
        let cloud = PointCloud::from_xyz([
            [1.0, 1.0, 1.0],
            [1.2, 1.0, 1.0],
            [1.0, 1.3, 1.0],
            [9.0, 9.0, 9.0],
        ])
        .unwrap();
        let center = Point3::new(1.0, 1.0, 1.0);
        let patch = ball_query_patch(&cloud, &center, 0.5, 512, 0).unwrap();
        assert_eq!(patch.len(), 3);
        assert!(patch.iter().all(|p| p.coords.norm() <= 1.0 + 1e-12));

        let isolated = ball_query_patch(&cloud, &Point3::new(-50.0, 0.0, 0.0), 0.5, 512, 0);
        assert!(matches!(isolated, Err(Error::EmptyPatch)));
    }

    #[test]
    fn single_point_patch_descriptor_uses_fallbacks() {
        let patch = PointCloud::from_xyz([[0.0, 0.0, 0.0]]).unwrap();
        let d = GeometricDescriptor.describe(&patch).unwrap();
        assert_eq!(d.len(), 32);
        // All radial mass in bin 0.
        assert_eq!(d[0], 1.0);
        assert!(d[1..16].iter().all(|&x| x == 0.0));
        // Eigenvalue block falls back to uniform.
        assert!((d[24] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[25] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d[26] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sample_view_is_deterministic() {
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                pts.push([
                    i as f64 * 0.11,
                    j as f64 * 0.11,
                    ((i * j) % 7) as f64 * 0.05,
                ]);
            }
        }
        let cloud = PointCloud::from_xyz(pts).unwrap();
        let cfg = SamplingConfig {
            voxel_size_downsample: 0.2,
            voxel_size_coverage: 0.2,
            fps_density_ratio: 0.05,
            seed: 1234,
            ..SamplingConfig::default()
        };
        let a = sample_view(&cloud, &cfg).unwrap();
        let b = sample_view(&cloud, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.keypoint_count() >= 3);
    }
}
