//! The conditional velocity field: a small alternating-attention transformer
//! with adaptive layer-norm time conditioning, trained with the conditional
//! flow-matching objective.
//!
//! Parameters are stored as named f64 tensors whose values are always exactly
//! representable in f32 (they are rounded through f32 at initialization and
//! after every optimizer update), so checkpoints round-trip losslessly.

pub mod checkpoint;
pub mod mat;
mod net;
pub mod optim;
pub mod tape;
pub mod train;

pub use mat::Mat;
pub use net::{
    cfm_loss, condition_input, embed_condition, fourier_encode, sample_timestep, time_embedding,
    velocity_forward, velocity_forward_opts, CfmSample, ConditionTokens, ForwardOptions,
};

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Fourier frequencies used for the log-scale embedding.
pub const SCALE_FOURIER_FREQUENCIES: usize = 4;

/// Initial value of the attention/feed-forward gate biases.
pub const GATE_BIAS_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of alternating-attention blocks (view, global, view, …).
    pub blocks: usize,
    /// Hidden width of every token.
    pub hidden: usize,
    /// Attention heads; must divide `hidden`.
    pub heads: usize,
    /// Width of the per-keypoint descriptors this model conditions on.
    pub descriptor_dim: usize,
    /// Fourier frequencies for coordinate encodings.
    pub fourier_frequencies: usize,
    /// Width of the sinusoidal time embedding (even).
    pub time_embed_dim: usize,
    pub parameter_init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            hidden: 128,
            heads: 4,
            descriptor_dim: 32,
            fourier_frequencies: 8,
            time_embed_dim: 32,
            parameter_init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.blocks >= 1
            && self.hidden >= 1
            && self.heads >= 1
            && self.hidden % self.heads == 0
            && self.descriptor_dim >= 1
            && self.fourier_frequencies >= 1
            && self.time_embed_dim >= 2
            && self.time_embed_dim % 2 == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "model config violates its invariants".into(),
            ))
        }
    }

    /// Width of `fourier_encode` applied to a 3D coordinate.
    pub fn point_input_dim(&self) -> usize {
        3 + 6 * self.fourier_frequencies
    }

    /// Width of the per-keypoint conditioning row:
    /// coordinate encoding ‖ descriptor ‖ log-scale encoding.
    pub fn condition_input_dim(&self) -> usize {
        self.point_input_dim() + self.descriptor_dim + (1 + 2 * SCALE_FOURIER_FREQUENCIES)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Zero,
    /// Zero except the two gate slices of a block modulation bias
    /// (layout: shift‖scale‖gate per sublayer), which start at the given
    /// value so blocks contribute from the first step.
    GateBias(f64),
}

/// Declarative parameter layout: single source of truth for names, shapes,
/// and init, shared by construction, checkpointing, and the graph builder.
fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.hidden;
    let mut layout = vec![
        (
            "embed.point.weight".into(),
            (cfg.point_input_dim(), d),
            Init::Xavier,
        ),
        ("embed.point.bias".into(), (1, d), Init::Zero),
        (
            "embed.cond.weight".into(),
            (cfg.condition_input_dim(), d),
            Init::Xavier,
        ),
        ("embed.cond.bias".into(), (1, d), Init::Zero),
        (
            "time.fc1.weight".into(),
            (cfg.time_embed_dim, d),
            Init::Xavier,
        ),
        ("time.fc1.bias".into(), (1, d), Init::Zero),
        ("time.fc2.weight".into(), (d, d), Init::Xavier),
        ("time.fc2.bias".into(), (1, d), Init::Zero),
    ];
    for b in 0..cfg.blocks {
        for proj in ["q", "k", "v", "o"] {
            layout.push((
                format!("block{b}.attn.{proj}.weight"),
                (d, d),
                Init::Xavier,
            ));
            layout.push((format!("block{b}.attn.{proj}.bias"), (1, d), Init::Zero));
        }
        // Modulation weights start at zero (shift/scale off); gate biases
        // start small so blocks contribute from the first step.
        layout.push((format!("block{b}.mod.weight"), (d, 6 * d), Init::Zero));
        layout.push((format!("block{b}.mod.bias"), (1, 6 * d), Init::GateBias(GATE_BIAS_INIT)));
        layout.push((format!("block{b}.ffn.fc1.weight"), (d, 4 * d), Init::Xavier));
        layout.push((format!("block{b}.ffn.fc1.bias"), (1, 4 * d), Init::Zero));
        layout.push((format!("block{b}.ffn.fc2.weight"), (4 * d, d), Init::Xavier));
        layout.push((format!("block{b}.ffn.fc2.bias"), (1, d), Init::Zero));
    }
    layout.push(("final.mod.weight".into(), (d, 2 * d), Init::Zero));
    layout.push(("final.mod.bias".into(), (1, 2 * d), Init::Zero));
    layout.push(("head.weight".into(), (d, 3), Init::Zero));
    layout.push(("head.bias".into(), (1, 3), Init::Zero));
    layout
}

/// Rounds through f32 so the value is exactly representable on disk.
#[inline]
pub(crate) fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Named tensor collection for all weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl Parameters {
    /// Fresh parameters from the seeded initializer.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.parameter_init_seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, (rows, cols), init) in parameter_layout(config) {
            let mat = match init {
                Init::Zero => Mat::zeros(rows, cols),
                Init::GateBias(g) => {
                    let mut m = Mat::zeros(rows, cols);
                    let d = cols / 6;
                    for j in (2 * d..3 * d).chain(5 * d..6 * d) {
                        m.data[j] = quantize_f32(g);
                    }
                    m
                }
                Init::Xavier => {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    let mut m = Mat::zeros(rows, cols);
                    for v in m.data.iter_mut() {
                        *v = quantize_f32(rng.random_range(-bound..bound));
                    }
                    m
                }
            };
            names.push(name);
            tensors.push(mat);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    /// Rebuilds parameters from named tensors (checkpoint load); every
    /// expected tensor must be present with the right shape.
    pub fn from_named_tensors(
        config: &ModelConfig,
        mut tensors: HashMap<String, Mat>,
    ) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut mats = Vec::new();
        for (name, (rows, cols), _) in parameter_layout(config) {
            let mat = tensors.remove(&name).ok_or_else(|| {
                Error::BadCheckpoint(format!("missing tensor {name}"))
            })?;
            if (mat.rows, mat.cols) != (rows, cols) {
                return Err(Error::BadCheckpoint(format!(
                    "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                    mat.rows, mat.cols
                )));
            }
            names.push(name);
            mats.push(mat);
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config: config.clone(),
            names,
            tensors: mats,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Mat {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| (t.rows, t.cols)).collect()
    }

    /// Matrix-like tensors (both dims > 1) get the matrix learning rate;
    /// everything else counts as vector-like.
    pub fn is_matrix_like(&self, i: usize) -> bool {
        self.tensors[i].rows > 1 && self.tensors[i].cols > 1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Gradient collection whose shapes mirror [`Parameters`] exactly.
#[derive(Debug, Clone)]
pub struct Gradients {
    tensors: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            tensors: params
                .shapes()
                .into_iter()
                .map(|(r, c)| Mat::zeros(r, c))
                .collect(),
        }
    }

    pub(crate) fn from_tensors(tensors: Vec<Mat>) -> Self {
        Self { tensors }
    }

    pub fn tensor(&self, i: usize) -> &Mat {
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            a.add_scaled_in_place(b, factor);
        }
    }

    pub fn mirrors(&self, params: &Parameters) -> bool {
        self.tensors.len() == params.len()
            && self
                .tensors
                .iter()
                .zip(params.tensors.iter())
                .all(|(g, p)| (g.rows, g.cols) == (p.rows, p.cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_f32_representable() {
        let cfg = ModelConfig {
            blocks: 2,
            hidden: 16,
            heads: 2,
            ..ModelConfig::default()
        };
        let a = Parameters::init(&cfg).unwrap();
        let b = Parameters::init(&cfg).unwrap();
        assert_eq!(a, b);
        for (_, t) in a.iter() {
            for &v in &t.data {
                assert_eq!(v, quantize_f32(v));
            }
        }
    }

    #[test]
    fn gradients_mirror_parameter_shapes() {
        let cfg = ModelConfig {
            blocks: 1,
            hidden: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let p = Parameters::init(&cfg).unwrap();
        let g = Gradients::zeros_like(&p);
        assert!(g.mirrors(&p));
    }

    #[test]
    fn config_rejects_bad_head_split() {
        let cfg = ModelConfig {
            hidden: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
