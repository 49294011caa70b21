//! Decoupled-weight-decay adaptive optimizer with two-tier learning rates:
//! matrix-like parameters (both dims > 1) get `lr_matrix`, everything else
//! `lr_vector`. Parameters and moments are rounded through f32 after every
//! update so checkpoints resume bit-exactly.

use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::{quantize_f32, Gradients, Parameters};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr_matrix: f64,
    pub lr_vector: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_matrix: 2e-3,
            lr_vector: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params
                .shapes()
                .into_iter()
                .map(|(r, c)| Mat::zeros(r, c))
                .collect(),
            v: params
                .shapes()
                .into_iter()
                .map(|(r, c)| Mat::zeros(r, c))
                .collect(),
            step: 0,
        }
    }

    /// One update; `lr_scale` applies schedule multipliers on top of the
    /// per-tier base rates.
    pub fn apply(
        &mut self,
        params: &mut Parameters,
        grads: &Gradients,
        cfg: &AdamConfig,
        lr_scale: f64,
    ) {
        assert!(grads.mirrors(params), "gradient shapes must mirror parameters");
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let lr = if params.is_matrix_like(i) {
                cfg.lr_matrix
            } else {
                cfg.lr_vector
            } * lr_scale;
            let g = grads.tensor(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.tensor_mut(i);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
                v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                let update = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p.data[j];
                p.data[j] = quantize_f32(p.data[j] - lr * update);
                m.data[j] = quantize_f32(m.data[j]);
                v.data[j] = quantize_f32(v.data[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_gradients_leave_parameters_bitwise_unchanged() {
        let cfg = ModelConfig {
            blocks: 1,
            hidden: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let mut params = Parameters::init(&cfg).unwrap();
        let before = params.clone();
        let grads = Gradients::zeros_like(&params);
        let mut opt = AdamState::new(&params);
        opt.apply(&mut params, &grads, &AdamConfig::default(), 1.0);
        assert_eq!(params, before);
    }

    #[test]
    fn nonzero_gradient_moves_only_touched_tensor() {
        let cfg = ModelConfig {
            blocks: 1,
            hidden: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let mut params = Parameters::init(&cfg).unwrap();
        let before = params.clone();
        let mut grads = Gradients::zeros_like(&params);
        let slot = params.position("head.weight").unwrap();
        // Reach into one tensor through the mirror struct.
        let mut tensors: Vec<Mat> = (0..params.len())
            .map(|i| grads.tensor(i).clone())
            .collect();
        tensors[slot].data[0] = 1.0;
        grads = Gradients::from_tensors(tensors);
        let mut opt = AdamState::new(&params);
        opt.apply(&mut params, &grads, &AdamConfig::default(), 1.0);
        assert_ne!(params.tensor(slot).data[0], before.tensor(slot).data[0]);
        assert_eq!(params.tensor(slot).data[1], before.tensor(slot).data[1]);
    }
}
