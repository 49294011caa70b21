//! Single-stage multi-view point cloud registration.
//!
//! The library registers N unposed views by generating the registered scene
//! with a conditional flow-matching model, enforcing per-view rigidity during
//! sampling, and recovering per-view rigid poses. It ships the full pipeline:
//! keypoint sampling with rotation-invariant descriptors, similarity-frame
//! canonicalization, a small alternating-attention velocity network trained
//! with the conditional flow-matching objective, a rigidity-forcing Euler
//! sampler with residual-based generation selection, training-sample curation
//! from posed sequences, synthetic scene generation, and evaluation metrics.
//!
//! Heavy inner loops (per-view preprocessing, parallel generations, batch
//! gradients, nearest-neighbor sums) run on rayon when the default `parallel`
//! feature is enabled and fall back to sequential execution otherwise; both
//! paths produce bit-identical results.

pub mod canonical;
pub mod curation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod sampling;

pub use error::{Error, Result};
