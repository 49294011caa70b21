//! Run configuration: one nested document covering every stage, with
//! unknown keys rejected and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{CurationConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::eval::SuccessCriteria;
use crate::model::train::TrainConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::sampling::SamplingConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub min_views: usize,
    pub max_views: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 20,
            min_views: 2,
            max_views: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub criteria: SuccessCriteria,
    /// Voxel for downsampling before Chamfer distance; 0 = exact CD.
    pub chamfer_voxel: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            criteria: SuccessCriteria::default(),
            chamfer_voxel: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset root holding `sample_*` manifest directories.
    pub data_dir: PathBuf,
    /// Posed sequence document for `curate`.
    pub sequence: PathBuf,
    /// Directory receiving checkpoints and the loss log.
    pub checkpoint_dir: PathBuf,
    /// Checkpoint file for `register` (and resume when it exists).
    pub checkpoint: PathBuf,
    /// Directory receiving registration outputs / evaluation reports.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub curation: CurationConfig,
    pub scene: SceneConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.sampling.validate()?;
        cfg.model.validate()?;
        cfg.sampler.validate()?;
        cfg.curation.validate()?;
        cfg.scene.validate()?;
        cfg.eval.criteria.validate()?;
        Ok(cfg)
    }

    /// Checks that the read paths a command depends on exist.
    pub fn validate_read_paths(&self, command: &str) -> Result<()> {
        let mut required: Vec<(&str, &Path)> = Vec::new();
        match command {
            "curate" => required.push(("paths.sequence", &self.paths.sequence)),
            "preprocess" | "train" => required.push(("paths.data_dir", &self.paths.data_dir)),
            "register" => {
                required.push(("paths.data_dir", &self.paths.data_dir));
                required.push(("paths.checkpoint", &self.paths.checkpoint));
            }
            "evaluate" => {
                required.push(("paths.data_dir", &self.paths.data_dir));
                required.push(("paths.output_dir", &self.paths.output_dir));
            }
            _ => {}
        }
        for (key, path) in required {
            if path.as_os_str().is_empty() || !path.exists() {
                return Err(Error::InvalidConfig(format!(
                    "{key} = {:?} does not exist",
                    path
                )));
            }
        }
        Ok(())
    }
}

/// Applies one `key=value` override onto a JSON config document. The key is
/// a dotted path (`sampler.steps=20`); the value parses as JSON when
/// possible and falls back to a string.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::InvalidConfig(format!("override {assignment:?} is not key=value"))
    })?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let obj = cursor.as_object_mut().ok_or_else(|| {
                Error::InvalidConfig(format!("override path {key:?} crosses a non-object"))
            })?;
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| {
                Error::InvalidConfig(format!("override path {key:?} crosses a non-object"))
            })?
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}
