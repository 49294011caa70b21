//! Posed-sequence loader for curation.
//!
//! A sequence document is JSON:
//! ```json
//! {
//!   "id": "seq-00",
//!   "frames": [
//!     { "timestamp": 0.0, "pose": [16 row-major values], "cloud": "frames/000.ply" }
//!   ]
//! }
//! ```
//! Cloud paths are relative to the document's directory; poses are
//! sensor-to-world. Inputs are assumed motion-deskewed.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;

use super::ply::read_point_cloud;
use crate::curation::{Frame, SequenceData};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceDoc {
    id: String,
    frames: Vec<FrameDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameDoc {
    timestamp: f64,
    pose: Vec<f64>,
    cloud: String,
}

pub fn read_sequence(path: &Path) -> Result<SequenceData> {
    let text = std::fs::read_to_string(path)?;
    let doc: SequenceDoc = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(doc.frames.len());
    for f in doc.frames {
        if f.pose.len() != 16 {
            return Err(Error::BadManifest(format!(
                "frame pose has {} values, expected 16",
                f.pose.len()
            )));
        }
        let rotation = Matrix3::new(
            f.pose[0], f.pose[1], f.pose[2], f.pose[4], f.pose[5], f.pose[6], f.pose[8],
            f.pose[9], f.pose[10],
        );
        let translation = Vector3::new(f.pose[3], f.pose[7], f.pose[11]);
        frames.push(Frame {
            cloud: read_point_cloud(&base.join(&f.cloud))?,
            pose: RigidTransform::new(rotation, translation)?,
            timestamp: f.timestamp,
        });
    }
    SequenceData::new(doc.id, frames)
}
