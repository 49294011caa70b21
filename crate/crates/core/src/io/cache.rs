//! Preprocessed-view cache: the sampled keypoints, descriptors, and reduced
//! cloud for every view of a manifest, stored as f64 so reloads are
//! bit-identical to recomputation.
//!
//! Layout (little-endian): magic `PFPV`, version u32, view count u32, then
//! per view: K u32, D u32, reduced count u32, K×3 keypoints, K×D descriptors,
//! reduced×3 points, K keypoint indices (u64).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Point3};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::sampling::SampledView;

const MAGIC: &[u8; 4] = b"PFPV";
const VERSION: u32 = 1;

pub fn write_view_cache(path: &Path, views: &[SampledView]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(views.len() as u32).to_le_bytes())?;
    for view in views {
        let k = view.keypoint_count();
        let d = view.descriptors.ncols();
        w.write_all(&(k as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&(view.source_reduced.len() as u32).to_le_bytes())?;
        for p in view.keypoints.iter() {
            for c in [p.x, p.y, p.z] {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for i in 0..k {
            for j in 0..d {
                w.write_all(&view.descriptors[(i, j)].to_le_bytes())?;
            }
        }
        for p in view.source_reduced.iter() {
            for c in [p.x, p.y, p.z] {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for &idx in &view.keypoint_indices {
            w.write_all(&(idx as u64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_view_cache(path: &Path) -> Result<Vec<SampledView>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadManifest("bad view cache magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::BadManifest(format!(
            "view cache version {version} unsupported (expected {VERSION})"
        )));
    }
    let n_views = read_u32(&mut r)? as usize;
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let k = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let reduced_len = read_u32(&mut r)? as usize;
        let keypoints = read_points(&mut r, k)?;
        let mut descriptors = DMatrix::zeros(k, d);
        for i in 0..k {
            for j in 0..d {
                descriptors[(i, j)] = read_f64(&mut r)?;
            }
        }
        let reduced = read_points(&mut r, reduced_len)?;
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            indices.push(read_u64(&mut r)? as usize);
        }
        views.push(SampledView {
            keypoints: PointCloud::new(keypoints)?,
            descriptors,
            source_reduced: PointCloud::new(reduced)?,
            keypoint_indices: indices,
        });
    }
    Ok(views)
}

fn read_points(r: &mut impl Read, n: usize) -> Result<Vec<Point3<f64>>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = read_f64(r)?;
        let y = read_f64(r)?;
        let z = read_f64(r)?;
        out.push(Point3::new(x, y, z));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{sample_view, SamplingConfig};

    #[test]
    fn cache_roundtrip_is_bit_identical() {
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                pts.push([i as f64 * 0.1, j as f64 * 0.1, ((i + j) % 4) as f64 * 0.07]);
            }
        }
        let cloud = PointCloud::from_xyz(pts).unwrap();
        let cfg = SamplingConfig {
            voxel_size_downsample: 0.15,
            voxel_size_coverage: 0.15,
            fps_density_ratio: 0.05,
            outlier_neighbors: 5,
            seed: 7,
            ..SamplingConfig::default()
        };
        let views = vec![sample_view(&cloud, &cfg).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("views.pfpv");
        write_view_cache(&path, &views).unwrap();
        let loaded = read_view_cache(&path).unwrap();
        assert_eq!(loaded, views);
    }
}
