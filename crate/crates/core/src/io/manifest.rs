//! On-disk sample manifests and registration outputs.
//!
//! A sample manifest is a directory:
//! ```text
//! sample_000042/
//!   views/view_000.ply …      one cloud per view, local frame
//!   poses.txt                 4×4 row-major world-from-view, one per line
//!   meta.json                 sequence id, seeds, overlap edges
//! ```
//! Poses are world-from-view: applying a pose to view-frame points yields
//! world-frame points (the convention is restated in the poses header).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ply::{read_point_cloud, read_to_string, write_point_cloud};
use crate::curation::{CurationSample, OverlapEdge, Provenance};
use crate::error::{Error, Result};
#[cfg(test)]
use crate::geometry::PointCloud;
use crate::geometry::{RigidTransform, SimilarityTransform};
use crate::sampler::RegistrationResult;

const POSES_HEADER: &str = "# world-from-view 4x4 row-major, one view per line (16 values)\n\
                            # applying the pose to view-frame points yields world-frame points\n\
                            # units: meters\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub sequence_id: String,
    pub attempt_seed: u64,
    pub intervals: Vec<(usize, usize)>,
    pub overlap_edges: Vec<OverlapEdge>,
}

fn pose_to_row(rigid: &RigidTransform) -> [f64; 16] {
    let r = rigid.rotation();
    let t = rigid.translation();
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        t[0],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        t[1],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t[2],
        0.0,
        0.0,
        0.0,
        1.0,
    ]
}

fn pose_from_row(values: &[f64]) -> Result<RigidTransform> {
    if values.len() != 16 {
        return Err(Error::BadManifest(format!(
            "pose row has {} values, expected 16",
            values.len()
        )));
    }
    let rotation = Matrix3::new(
        values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
        values[10],
    );
    let translation = Vector3::new(values[3], values[7], values[11]);
    RigidTransform::new(rotation, translation)
}

fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let mut out = String::from(POSES_HEADER);
    for pose in poses {
        let row = pose_to_row(pose);
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = read_to_string(path)?;
    let mut poses = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = trimmed
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::BadManifest(format!("bad pose value {t:?}")))
            })
            .collect::<Result<_>>()?;
        poses.push(pose_from_row(&values)?);
    }
    Ok(poses)
}

pub fn view_file_name(index: usize) -> String {
    format!("view_{index:03}.ply")
}

pub fn write_sample_manifest(dir: &Path, sample: &CurationSample) -> Result<()> {
    let views_dir = dir.join("views");
    fs::create_dir_all(&views_dir)?;
    for (i, view) in sample.views.iter().enumerate() {
        write_point_cloud(view, &views_dir.join(view_file_name(i)))?;
    }
    write_poses(&dir.join("poses.txt"), &sample.gt_poses)?;
    let meta = ManifestMeta {
        sequence_id: sample.provenance.sequence_id.clone(),
        attempt_seed: sample.provenance.attempt_seed,
        intervals: sample.provenance.intervals.clone(),
        overlap_edges: sample.overlap_edges.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_sample_manifest(dir: &Path) -> Result<CurationSample> {
    let meta: ManifestMeta = serde_json::from_str(&read_to_string(&dir.join("meta.json"))?)?;
    let gt_poses = read_poses(&dir.join("poses.txt"))?;
    let views_dir = dir.join("views");
    let mut views = Vec::with_capacity(gt_poses.len());
    for i in 0..gt_poses.len() {
        let path = views_dir.join(view_file_name(i));
        if !path.exists() {
            return Err(Error::BadManifest(format!(
                "poses.txt lists {} views but {} is missing",
                gt_poses.len(),
                path.display()
            )));
        }
        views.push(read_point_cloud(&path)?);
    }
    // No extra view files beyond the pose count.
    let extra = views_dir.join(view_file_name(gt_poses.len()));
    if extra.exists() {
        return Err(Error::BadManifest(format!(
            "{} exists but poses.txt lists only {} views",
            extra.display(),
            gt_poses.len()
        )));
    }
    Ok(CurationSample {
        views,
        gt_poses,
        overlap_edges: meta.overlap_edges,
        provenance: Provenance {
            sequence_id: meta.sequence_id,
            intervals: meta.intervals,
            attempt_seed: meta.attempt_seed,
        },
    })
}

/// Sorted sample directories (`sample_*`) under a dataset root.
pub fn list_sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sample_"))
        {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:06}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationRecord {
    pub selected_generation: usize,
    pub rigidity_residual: f64,
    pub generation_residuals: Vec<f64>,
    pub noise_seeds: Vec<u64>,
    pub canonical_scale: f64,
}

/// Writes one registration output: registered clouds, estimated poses, and
/// the residual record.
pub fn write_registration(dir: &Path, result: &RegistrationResult) -> Result<()> {
    let reg_dir = dir.join("registered");
    fs::create_dir_all(&reg_dir)?;
    for (i, cloud) in result.registered_views.iter().enumerate() {
        write_point_cloud(cloud, &reg_dir.join(view_file_name(i)))?;
    }
    let poses: Vec<RigidTransform> = result
        .metric_poses
        .iter()
        .map(similarity_to_rigid)
        .collect::<Result<_>>()?;
    write_poses(&dir.join("poses.txt"), &poses)?;
    let record = RegistrationRecord {
        selected_generation: result.selected_generation,
        rigidity_residual: result.rigidity_residual,
        generation_residuals: result.generation_residuals.clone(),
        noise_seeds: result.noise_seeds.clone(),
        canonical_scale: result.canonical_scale,
    };
    fs::write(dir.join("result.json"), serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

pub fn read_registration_poses(dir: &Path) -> Result<Vec<RigidTransform>> {
    read_poses(&dir.join("poses.txt"))
}

pub fn read_registration_record(dir: &Path) -> Result<RegistrationRecord> {
    Ok(serde_json::from_str(&read_to_string(
        &dir.join("result.json"),
    )?)?)
}

/// Metric poses from registration carry scale ≈ 1 (the canonical scaling is
/// undone exactly up to rounding); fold them into rigid transforms.
pub fn similarity_to_rigid(sim: &SimilarityTransform) -> Result<RigidTransform> {
    RigidTransform::new(sim.rotation() * sim.scale(), *sim.translation())
}
