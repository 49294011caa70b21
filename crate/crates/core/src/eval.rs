//! Success-rate and error reporting.
//!
//! Multi-view poses are defined up to one global rigid transform; errors are
//! measured after gauge alignment on an anchor view (by default the view with
//! the most points, matching the canonicalization's reference convention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_distance, rotation_error_deg, translation_error_m, PointCloud, RigidTransform,
};
use crate::par;
use crate::sampling::voxel_downsample;

/// Success rule for one registration pair or view.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum SuccessCriteria {
    /// RMS distance between the two pose images of the source points.
    PointwiseRmse { rmse_threshold: f64 },
    /// Thresholds on translation (m) and rotation (deg); both inclusive.
    PoseThresholds {
        te_threshold: f64,
        re_threshold: f64,
    },
}

impl SuccessCriteria {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            SuccessCriteria::PointwiseRmse { rmse_threshold } => *rmse_threshold > 0.0,
            SuccessCriteria::PoseThresholds {
                te_threshold,
                re_threshold,
            } => *te_threshold > 0.0 && *re_threshold > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("thresholds must be positive".into()))
        }
    }
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        SuccessCriteria::PoseThresholds {
            te_threshold: 2.0,
            re_threshold: 5.0,
        }
    }
}

/// RMS over source points of `‖T_est(p) − T_gt(p)‖`.
pub fn correspondence_rmse(
    source: &PointCloud,
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
) -> f64 {
    let sum_sq: f64 = source
        .iter()
        .map(|p| (t_est.apply_point(p) - t_gt.apply_point(p)).norm_squared())
        .sum();
    (sum_sq / source.len() as f64).sqrt()
}

/// Evaluates one pose pair against the criteria. Pointwise-RMSE criteria
/// need the source cloud. Returns (success, rotation error °, translation
/// error m).
pub fn pairwise_success(
    t_est: &RigidTransform,
    t_gt: &RigidTransform,
    criteria: &SuccessCriteria,
    source: Option<&PointCloud>,
) -> Result<(bool, f64, f64)> {
    let re = rotation_error_deg(t_gt.rotation(), t_est.rotation());
    let te = translation_error_m(t_gt.translation(), t_est.translation());
    let success = match criteria {
        SuccessCriteria::PoseThresholds {
            te_threshold,
            re_threshold,
        } => re <= *re_threshold && te <= *te_threshold,
        SuccessCriteria::PointwiseRmse { rmse_threshold } => {
            let cloud = source.ok_or(Error::EmptyCloud)?;
            correspondence_rmse(cloud, t_est, t_gt) <= *rmse_threshold
        }
    };
    Ok((success, re, te))
}

/// Per-view rotation/translation errors after anchoring: every estimated
/// pose is composed with `T_gt,anchor · T_est,anchor⁻¹`, removing the global
/// gauge, then compared to its ground truth.
pub fn multiview_errors(
    estimated: &[RigidTransform],
    ground_truth: &[RigidTransform],
    anchor: usize,
) -> Result<Vec<(f64, f64)>> {
    if estimated.len() != ground_truth.len() {
        return Err(Error::LengthMismatch {
            expected: ground_truth.len(),
            got: estimated.len(),
        });
    }
    if estimated.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: estimated.len(),
        });
    }
    assert!(anchor < estimated.len());
    let gauge = ground_truth[anchor].compose(&estimated[anchor].inverse());
    Ok(estimated
        .iter()
        .zip(ground_truth.iter())
        .map(|(est, gt)| {
            let aligned = gauge.compose(est);
            (
                rotation_error_deg(gt.rotation(), aligned.rotation()),
                translation_error_m(gt.translation(), aligned.translation()),
            )
        })
        .collect())
}

/// Everything the evaluator needs for one registered sample.
#[derive(Debug, Clone)]
pub struct EvalSample {
    /// Estimated view-to-output poses. Metric poses from registration have
    /// scale ≈ 1; convert with [`crate::geometry::SimilarityTransform`]
    /// accessors before building this record.
    pub estimated: Vec<RigidTransform>,
    pub ground_truth: Vec<RigidTransform>,
    /// Raw views in their local frames (for CD and anchor choice).
    pub views: Vec<PointCloud>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    pub views: usize,
    pub anchor: usize,
    pub success: bool,
    pub mean_re_deg: f64,
    pub mean_te_m: f64,
    pub chamfer_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate_percent: f64,
    pub mean_re_deg: f64,
    pub mean_te_m: f64,
    pub mean_chamfer_m: f64,
    /// Voxel size used to downsample clouds before Chamfer distance;
    /// 0 disables downsampling.
    pub chamfer_voxel: f64,
    pub rows: Vec<SampleRow>,
}

impl EvalReport {
    /// Fixed-column delimiter-separated table of the per-sample rows.
    pub fn to_table(&self) -> String {
        let mut out = String::from("sample,views,anchor,success,mean_re_deg,mean_te_m,chamfer_m\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.9},{:.9},{:.9}\n",
                r.sample, r.views, r.anchor, r.success as u8, r.mean_re_deg, r.mean_te_m, r.chamfer_m
            ));
        }
        out
    }
}

/// Evaluates registered samples: gauge-aligned per-view errors, all-views
/// success per sample, and Chamfer distance between the registered merge and
/// the ground-truth merge (both voxel-downsampled at `chamfer_voxel` when
/// positive).
pub fn evaluate(
    samples: &[EvalSample],
    criteria: &SuccessCriteria,
    chamfer_voxel: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    criteria.validate()?;
    let rows_res = par::map_range(samples.len(), |i| evaluate_sample(i, &samples[i], criteria, chamfer_voxel));
    let mut rows = Vec::with_capacity(samples.len());
    for r in rows_res {
        rows.push(r?);
    }
    let n = rows.len() as f64;
    let success_rate = rows.iter().filter(|r| r.success).count() as f64 / n * 100.0;
    let mean_re = rows.iter().map(|r| r.mean_re_deg).sum::<f64>() / n;
    let mean_te = rows.iter().map(|r| r.mean_te_m).sum::<f64>() / n;
    let mean_cd = rows.iter().map(|r| r.chamfer_m).sum::<f64>() / n;
    Ok(EvalReport {
        success_rate_percent: success_rate,
        mean_re_deg: mean_re,
        mean_te_m: mean_te,
        mean_chamfer_m: mean_cd,
        chamfer_voxel,
        rows,
    })
}

fn evaluate_sample(
    index: usize,
    sample: &EvalSample,
    criteria: &SuccessCriteria,
    chamfer_voxel: f64,
) -> Result<SampleRow> {
    if sample.estimated.len() != sample.ground_truth.len()
        || sample.views.len() != sample.estimated.len()
    {
        return Err(Error::LengthMismatch {
            expected: sample.ground_truth.len(),
            got: sample.estimated.len(),
        });
    }
    // Anchor on the view with the most points (ties → lowest index).
    let anchor = sample
        .views
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("non-empty views");
    let errors = multiview_errors(&sample.estimated, &sample.ground_truth, anchor)?;
    let gauge = sample.ground_truth[anchor].compose(&sample.estimated[anchor].inverse());

    let mut success = true;
    for (v, &(re, te)) in errors.iter().enumerate() {
        let view_ok = match criteria {
            SuccessCriteria::PoseThresholds {
                te_threshold,
                re_threshold,
            } => re <= *re_threshold && te <= *te_threshold,
            SuccessCriteria::PointwiseRmse { rmse_threshold } => {
                let aligned = gauge.compose(&sample.estimated[v]);
                correspondence_rmse(&sample.views[v], &aligned, &sample.ground_truth[v])
                    <= *rmse_threshold
            }
        };
        success &= view_ok;
    }

    // Chamfer between the gauge-aligned estimated merge and the gt merge.
    let mut est_merged = Vec::new();
    let mut gt_merged = Vec::new();
    for ((est, gt), view) in sample
        .estimated
        .iter()
        .zip(sample.ground_truth.iter())
        .zip(sample.views.iter())
    {
        let aligned = gauge.compose(est);
        est_merged.extend(view.iter().map(|p| aligned.apply_point(p)));
        gt_merged.extend(view.iter().map(|p| gt.apply_point(p)));
    }
    let mut est_cloud = PointCloud::from_points_unchecked(est_merged);
    let mut gt_cloud = PointCloud::from_points_unchecked(gt_merged);
    if chamfer_voxel > 0.0 {
        est_cloud = voxel_downsample(&est_cloud, chamfer_voxel);
        gt_cloud = voxel_downsample(&gt_cloud, chamfer_voxel);
    }
    let cd = chamfer_distance(&est_cloud, &gt_cloud)?;

    let n = errors.len() as f64;
    Ok(SampleRow {
        sample: index,
        views: sample.views.len(),
        anchor,
        success,
        mean_re_deg: errors.iter().map(|e| e.0).sum::<f64>() / n,
        mean_te_m: errors.iter().map(|e| e.1).sum::<f64>() / n,
        chamfer_m: cd,
    })
}

/// Convenience for tests and diagnostics: evaluates poses that are exactly
/// ground truth, which must yield a perfect report.
pub fn identity_sample(views: Vec<PointCloud>, gt: Vec<RigidTransform>) -> EvalSample {
    EvalSample {
        estimated: gt.clone(),
        ground_truth: gt,
        views,
    }
}
