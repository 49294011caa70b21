//! Training loop: token-budget batching, per-epoch canonicalization
//! augmentation, the flow-matching objective, and checkpoint/resume.
//!
//! Every random draw derives from `(seed, epoch, sample)` so a resumed run
//! replays exactly the draws the original run would have made.

use std::path::Path;

use nalgebra::Point3;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::mat::Mat;
use super::net::{cfm_loss, condition_input, sample_timestep, CfmSample};
use super::optim::{AdamConfig, AdamState};
use super::{ModelConfig, Parameters};
use crate::canonical::{canonicalize_inputs, canonicalize_target};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::par;
use crate::rng::{split_seed, stream};
use crate::sampling::SampledView;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Token budget per optimizer step; batches never exceed it and never
    /// split a sample.
    pub max_tokens: usize,
    pub optimizer: AdamConfig,
    /// Epochs at which the learning rate halves (cumulative).
    pub lr_halve_epochs: Vec<usize>,
    /// Steps between checkpoints; 0 writes only the final checkpoint.
    pub checkpoint_every_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            max_tokens: 4096,
            optimizer: AdamConfig::default(),
            lr_halve_epochs: Vec::new(),
            checkpoint_every_steps: 0,
            seed: 0,
        }
    }
}

/// One curated multi-view scene, preprocessed and ready for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub views: Vec<SampledView>,
    /// View-to-world poses for each view.
    pub gt_poses: Vec<RigidTransform>,
}

impl TrainSample {
    pub fn token_count(&self) -> usize {
        self.views.iter().map(|v| v.keypoint_count()).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Loss after each optimizer step of this run.
    pub losses: Vec<f64>,
    pub final_step: u64,
}

/// Greedy token-budget packing: walk `order`, closing a batch whenever the
/// next sample would push it past `max_tokens`. Samples are never split.
pub fn pack_batches(token_counts: &[usize], order: &[usize], max_tokens: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0usize;
    for &idx in order {
        let tokens = token_counts[idx];
        if !current.is_empty() && used + tokens > max_tokens {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += tokens;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(split_seed(seed, 0xA1C3_0000 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Draws this epoch's canonicalization, noise, and timestep for one sample.
pub fn prepare_sample(
    sample: &TrainSample,
    model_cfg: &ModelConfig,
    seed: u64,
    epoch: usize,
    sample_id: usize,
) -> Result<CfmSample> {
    let stream_seed = split_seed(
        split_seed(seed, 0xB0D1_0000 + epoch as u64),
        sample_id as u64,
    );
    let mut rng = stream(stream_seed);
    let canon = canonicalize_inputs(&sample.views, &mut rng)?;
    let target = canonicalize_target(&sample.views, &sample.gt_poses, &canon)?;
    let total = target.len();
    let mut noise = Vec::with_capacity(total);
    for _ in 0..total {
        let x: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = StandardNormal.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        noise.push(Point3::new(x, y, z));
    }
    let t = sample_timestep(&mut rng);
    let descriptors: Vec<_> = sample.views.iter().map(|v| v.descriptors.clone()).collect();
    let cond_input = condition_input(
        &canon.normalized_keypoints,
        &descriptors,
        canon.global_scale,
        model_cfg,
    )?;
    Ok(CfmSample {
        x0: target.points,
        x1: noise,
        view_counts: target.view_counts,
        cond_input,
        t,
    })
}

pub struct Trainer {
    params: Parameters,
    opt: AdamState,
    cfg: TrainConfig,
    global_step: u64,
    epoch: usize,
    batch_in_epoch: usize,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let params = Parameters::init(model_cfg)?;
        let opt = AdamState::new(&params);
        Ok(Self {
            params,
            opt,
            cfg,
            global_step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    /// Restores parameters, optimizer moments, and the training position from
    /// a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume_from(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let (params, mut rest) = ck.into_parameters()?;
        let mut scalar = |name: &str| -> Result<f64> {
            rest.remove(name)
                .map(|m| m.data[0])
                .ok_or_else(|| Error::BadCheckpoint(format!("missing trainer tensor {name}")))
        };
        let global_step = scalar("trainer.step")? as u64;
        let epoch = scalar("trainer.epoch")? as usize;
        let batch_in_epoch = scalar("trainer.batch")? as usize;
        let adam_step = scalar("opt.step")? as u64;
        let mut opt = AdamState::new(&params);
        opt.step = adam_step;
        for i in 0..params.len() {
            let name = params.name(i).to_string();
            let m = rest
                .remove(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::BadCheckpoint(format!("missing opt.m.{name}")))?;
            let v = rest
                .remove(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::BadCheckpoint(format!("missing opt.v.{name}")))?;
            if (m.rows, m.cols) != (params.tensor(i).rows, params.tensor(i).cols)
                || (v.rows, v.cols) != (params.tensor(i).rows, params.tensor(i).cols)
            {
                return Err(Error::BadCheckpoint(format!(
                    "optimizer moments for {name} have the wrong shape"
                )));
            }
            opt.m[i] = m;
            opt.v[i] = v;
        }
        Ok(Self {
            params,
            opt,
            cfg,
            global_step,
            epoch,
            batch_in_epoch,
        })
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut extra = vec![
            (
                "trainer.step".to_string(),
                Mat::from_vec(1, 1, vec![self.global_step as f64]),
            ),
            (
                "trainer.epoch".to_string(),
                Mat::from_vec(1, 1, vec![self.epoch as f64]),
            ),
            (
                "trainer.batch".to_string(),
                Mat::from_vec(1, 1, vec![self.batch_in_epoch as f64]),
            ),
            (
                "opt.step".to_string(),
                Mat::from_vec(1, 1, vec![self.opt.step as f64]),
            ),
        ];
        for i in 0..self.params.len() {
            let name = self.params.name(i);
            extra.push((format!("opt.m.{name}"), self.opt.m[i].clone()));
            extra.push((format!("opt.v.{name}"), self.opt.v[i].clone()));
        }
        write_checkpoint(path, &self.params, &extra)
    }

    fn lr_scale(&self, epoch: usize) -> f64 {
        let halvings = self
            .cfg
            .lr_halve_epochs
            .iter()
            .filter(|&&e| epoch >= e)
            .count();
        0.5f64.powi(halvings as i32)
    }

    /// Runs training from the current position to `cfg.epochs`, writing
    /// checkpoints into `checkpoint_dir` when provided.
    pub fn run(
        &mut self,
        dataset: &[TrainSample],
        checkpoint_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let token_counts: Vec<usize> = dataset.iter().map(|s| s.token_count()).collect();
        for (i, &tokens) in token_counts.iter().enumerate() {
            if tokens > self.cfg.max_tokens {
                return Err(Error::InvalidConfig(format!(
                    "sample {i} has {tokens} tokens, over the {} budget; batches never split samples",
                    self.cfg.max_tokens
                )));
            }
        }

        let model_cfg = self.params.config().clone();
        let mut report = TrainReport::default();
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let order = epoch_order(dataset.len(), self.cfg.seed, epoch);
            let batches = pack_batches(&token_counts, &order, self.cfg.max_tokens);
            for (bi, batch) in batches.iter().enumerate() {
                if bi < self.batch_in_epoch {
                    continue;
                }
                let prepared = par::map(batch, |&sample_id| {
                    prepare_sample(&dataset[sample_id], &model_cfg, self.cfg.seed, epoch, sample_id)
                });
                let mut cfm_batch = Vec::with_capacity(prepared.len());
                for p in prepared {
                    cfm_batch.push(p?);
                }
                let (loss, grads) = cfm_loss(&self.params, &cfm_batch)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.global_step as usize,
                        loss,
                    });
                }
                let scale = self.lr_scale(epoch);
                self.opt.apply(&mut self.params, &grads, &self.cfg.optimizer, scale);
                self.global_step += 1;
                self.batch_in_epoch = bi + 1;
                report.losses.push(loss);

                if let Some(dir) = checkpoint_dir {
                    if self.cfg.checkpoint_every_steps > 0
                        && self.global_step % self.cfg.checkpoint_every_steps as u64 == 0
                    {
                        self.save_checkpoint(
                            &dir.join(format!("checkpoint_{:06}.pfrg", self.global_step)),
                        )?;
                    }
                }
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(&dir.join("latest.pfrg"))?;
        }
        report.final_step = self.global_step;
        Ok(report)
    }
}

/// Convenience wrapper: fresh trainer, full run, returns the parameters and
/// the loss curve.
pub fn train(
    dataset: &[TrainSample],
    model_cfg: &ModelConfig,
    cfg: TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Parameters, TrainReport)> {
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let report = trainer.run(dataset, checkpoint_dir)?;
    Ok((trainer.into_params(), report))
}
