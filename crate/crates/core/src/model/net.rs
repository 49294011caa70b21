//! Graph construction for the velocity network and the flow-matching loss.
//!
//! Tokens are view-major; per-view attention runs over contiguous segments so
//! no mask tensor is needed, and global attention is the single full segment.
//! Time conditioning modulates every layer norm (shift/scale/gate) from a
//! sinusoidal embedding of `t`, with the modulation weights zero-initialized
//! so the network starts as the identity map.

use nalgebra::{DMatrix, Point3};
use rand::Rng;

use super::mat::Mat;
use super::tape::{Tape, Var};
use super::{ModelConfig, Gradients, Parameters, SCALE_FOURIER_FREQUENCIES};
use crate::canonical::FlowState;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::par;
use crate::rng::Stream;

/// Concatenation of `x` with `sin(2^k·π·x)` and `cos(2^k·π·x)` for
/// `k = 0..n_freq`, per component. Output length is `dim·(1 + 2·n_freq)`.
pub fn fourier_encode(x: &[f64], n_freq: usize) -> Vec<f64> {
    assert!(n_freq >= 1);
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * n_freq));
    out.extend_from_slice(x);
    for k in 0..n_freq {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        for &c in x {
            out.push((w * c).sin());
        }
        for &c in x {
            out.push((w * c).cos());
        }
    }
    out
}

/// Sinusoidal embedding of the flow time, diffusion-transformer style:
/// `t` is mapped to `[0, 1000]` and paired cos/sin channels span a geometric
/// frequency ladder.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let t_scaled = t * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = (-(10_000.0f64.ln()) * j as f64 / half as f64).exp();
        out.push((t_scaled * freq).cos());
        out.push((t_scaled * freq).sin());
    }
    out
}

/// Draws a flow time from the arcsine (U-shaped) distribution via
/// `t = sin²(π·u/2)`, mass concentrated at both ends.
pub fn sample_timestep(rng: &mut Stream) -> f64 {
    let u: f64 = rng.random();
    let s = (std::f64::consts::FRAC_PI_2 * u).sin();
    s * s
}

/// Per-point conditioning tokens after the learned embedding.
#[derive(Debug, Clone)]
pub struct ConditionTokens {
    /// K × hidden embedding matrix, view-major rows.
    pub tokens: Mat,
    pub view_counts: Vec<usize>,
    /// The metric scene scale the tokens were built with.
    pub scale: f64,
}

/// Builds the raw (pre-embedding) conditioning rows:
/// `fourier(coords) ‖ descriptor ‖ fourier(ln scale)`.
pub fn condition_input(
    keypoints: &[PointCloud],
    descriptors: &[DMatrix<f64>],
    scale: f64,
    cfg: &ModelConfig,
) -> Result<Mat> {
    if keypoints.len() != descriptors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} keypoint sets vs {} descriptor sets",
            keypoints.len(),
            descriptors.len()
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::DegenerateScale(scale));
    }
    let total: usize = keypoints.iter().map(|k| k.len()).sum();
    let scale_enc = fourier_encode(&[scale.ln()], SCALE_FOURIER_FREQUENCIES);
    let mut out = Mat::zeros(total, cfg.condition_input_dim());
    let mut row = 0;
    for (cloud, desc) in keypoints.iter().zip(descriptors.iter()) {
        if desc.nrows() != cloud.len() || desc.ncols() != cfg.descriptor_dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor matrix is {}x{}, expected {}x{}",
                desc.nrows(),
                desc.ncols(),
                cloud.len(),
                cfg.descriptor_dim
            )));
        }
        for (i, p) in cloud.iter().enumerate() {
            let enc = fourier_encode(&[p.x, p.y, p.z], cfg.fourier_frequencies);
            let r = out.row_mut(row);
            r[..enc.len()].copy_from_slice(&enc);
            for j in 0..cfg.descriptor_dim {
                r[enc.len() + j] = desc[(i, j)];
            }
            r[enc.len() + cfg.descriptor_dim..].copy_from_slice(&scale_enc);
            row += 1;
        }
    }
    Ok(out)
}

/// Fourier rows for a list of points.
fn fourier_rows(points: &[Point3<f64>], n_freq: usize) -> Mat {
    let width = 3 + 6 * n_freq;
    let mut out = Mat::zeros(points.len(), width);
    for (i, p) in points.iter().enumerate() {
        let enc = fourier_encode(&[p.x, p.y, p.z], n_freq);
        out.row_mut(i).copy_from_slice(&enc);
    }
    out
}

/// Handles to every parameter pushed onto a tape, slot-aligned.
struct ParamVars(Vec<Var>);

fn push_params(tape: &mut Tape, params: &Parameters) -> ParamVars {
    ParamVars(
        (0..params.len())
            .map(|i| tape.param(i, params.tensor(i).clone()))
            .collect(),
    )
}

impl ParamVars {
    fn get(&self, params: &Parameters, name: &str) -> Var {
        self.0[params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// `x ⊙ (1 + scale) + shift` with row-broadcast modulation vectors.
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
    let scaled = tape.mul_row(x, scale);
    let summed = tape.add(x, scaled);
    tape.add_row(summed, shift)
}

/// Multi-head self-attention over contiguous row segments.
fn attention(
    tape: &mut Tape,
    y: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    segments: &[(usize, usize)],
    heads: usize,
    hidden: usize,
) -> Var {
    let dh = hidden / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let q_full = linear(tape, y, wq, bq);
    let k_full = linear(tape, y, wk, bk);
    let v_full = linear(tape, y, wv, bv);
    let mut seg_outputs = Vec::with_capacity(segments.len());
    for &(start, len) in segments {
        let q_seg = tape.narrow_rows(q_full, start, len);
        let k_seg = tape.narrow_rows(k_full, start, len);
        let v_seg = tape.narrow_rows(v_full, start, len);
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.narrow_cols(q_seg, h * dh, dh);
            let k = tape.narrow_cols(k_seg, h * dh, dh);
            let v = tape.narrow_cols(v_seg, h * dh, dh);
            let scores = tape.matmul_nt(q, k);
            let scaled = tape.scale(scores, inv_sqrt);
            let probs = tape.softmax_rows(scaled);
            head_outputs.push(tape.matmul(probs, v));
        }
        seg_outputs.push(tape.concat_cols(head_outputs));
    }
    let merged = if seg_outputs.len() == 1 {
        seg_outputs[0]
    } else {
        tape.concat_rows(seg_outputs)
    };
    linear(tape, merged, wo, bo)
}

/// Optional test hooks for the forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Skip the attention sublayer in global-attention blocks; per-view
    /// blocks and feed-forward sublayers are unaffected. Used to probe that
    /// cross-view information flows only through global attention.
    pub skip_global_attention: bool,
}

/// Builds the full velocity network on `tape` and returns the K × 3 output.
///
/// `cond_tokens` must already be embedded to the hidden width (either by
/// [`embed_condition`] at inference or on-tape during training).
fn forward_graph(
    tape: &mut Tape,
    params: &Parameters,
    pvars: &ParamVars,
    t: f64,
    points: &[Point3<f64>],
    view_counts: &[usize],
    cond_tokens: Var,
    opts: ForwardOptions,
) -> Var {
    let cfg = params.config();
    let d = cfg.hidden;
    let total: usize = view_counts.iter().sum();
    debug_assert_eq!(total, points.len());

    // Per-view contiguous segments; the global segment is the whole range.
    let mut view_segments = Vec::with_capacity(view_counts.len());
    let mut offset = 0;
    for &count in view_counts {
        view_segments.push((offset, count));
        offset += count;
    }
    let global_segment = [(0usize, total)];

    let xt_enc = fourier_rows(points, cfg.fourier_frequencies);
    let xt_const = tape.constant(xt_enc);
    let w_pt = pvars.get(params, "embed.point.weight");
    let b_pt = pvars.get(params, "embed.point.bias");
    let embedded = linear(tape, xt_const, w_pt, b_pt);
    let mut x = tape.add(embedded, cond_tokens);

    let te = tape.constant(Mat::from_vec(
        1,
        cfg.time_embed_dim,
        time_embedding(t, cfg.time_embed_dim),
    ));
    let w_t1 = pvars.get(params, "time.fc1.weight");
    let b_t1 = pvars.get(params, "time.fc1.bias");
    let w_t2 = pvars.get(params, "time.fc2.weight");
    let b_t2 = pvars.get(params, "time.fc2.bias");
    let h1 = linear(tape, te, w_t1, b_t1);
    let h1 = tape.silu(h1);
    let tc = linear(tape, h1, w_t2, b_t2);
    let tc_act = tape.silu(tc);

    for b in 0..cfg.blocks {
        let is_global = b % 2 == 1;
        let w_mod = pvars.get(params, &format!("block{b}.mod.weight"));
        let b_mod = pvars.get(params, &format!("block{b}.mod.bias"));
        let m = linear(tape, tc_act, w_mod, b_mod);
        let shift_attn = tape.narrow_cols(m, 0, d);
        let scale_attn = tape.narrow_cols(m, d, d);
        let gate_attn = tape.narrow_cols(m, 2 * d, d);
        let shift_ffn = tape.narrow_cols(m, 3 * d, d);
        let scale_ffn = tape.narrow_cols(m, 4 * d, d);
        let gate_ffn = tape.narrow_cols(m, 5 * d, d);

        if !(is_global && opts.skip_global_attention) {
            let normed = tape.layer_norm_rows(x);
            let y = modulate(tape, normed, shift_attn, scale_attn);
            let attn_out = attention(
                tape,
                y,
                pvars.get(params, &format!("block{b}.attn.q.weight")),
                pvars.get(params, &format!("block{b}.attn.q.bias")),
                pvars.get(params, &format!("block{b}.attn.k.weight")),
                pvars.get(params, &format!("block{b}.attn.k.bias")),
                pvars.get(params, &format!("block{b}.attn.v.weight")),
                pvars.get(params, &format!("block{b}.attn.v.bias")),
                pvars.get(params, &format!("block{b}.attn.o.weight")),
                pvars.get(params, &format!("block{b}.attn.o.bias")),
                if is_global {
                    &global_segment
                } else {
                    &view_segments
                },
                cfg.heads,
                d,
            );
            let gated = tape.mul_row(attn_out, gate_attn);
            x = tape.add(x, gated);
        }

        let normed = tape.layer_norm_rows(x);
        let y = modulate(tape, normed, shift_ffn, scale_ffn);
        let w1 = pvars.get(params, &format!("block{b}.ffn.fc1.weight"));
        let b1 = pvars.get(params, &format!("block{b}.ffn.fc1.bias"));
        let w2 = pvars.get(params, &format!("block{b}.ffn.fc2.weight"));
        let b2 = pvars.get(params, &format!("block{b}.ffn.fc2.bias"));
        let f1 = linear(tape, y, w1, b1);
        let f1 = tape.gelu(f1);
        let f2 = linear(tape, f1, w2, b2);
        let gated = tape.mul_row(f2, gate_ffn);
        x = tape.add(x, gated);
    }

    let w_modf = pvars.get(params, "final.mod.weight");
    let b_modf = pvars.get(params, "final.mod.bias");
    let mf = linear(tape, tc_act, w_modf, b_modf);
    let shift_f = tape.narrow_cols(mf, 0, d);
    let scale_f = tape.narrow_cols(mf, d, d);
    let normed = tape.layer_norm_rows(x);
    let y = modulate(tape, normed, shift_f, scale_f);
    let w_head = pvars.get(params, "head.weight");
    let b_head = pvars.get(params, "head.bias");
    linear(tape, y, w_head, b_head)
}

/// Embeds canonical keypoints, descriptors, and the scene scale into
/// per-point condition tokens with the learned linear map.
pub fn embed_condition(
    params: &Parameters,
    keypoints: &[PointCloud],
    descriptors: &[DMatrix<f64>],
    scale: f64,
) -> Result<ConditionTokens> {
    let cfg = params.config();
    let input = condition_input(keypoints, descriptors, scale, cfg)?;
    let mut tape = Tape::new(params.len());
    let pvars = push_params(&mut tape, params);
    let input_var = tape.constant(input);
    let w = pvars.get(params, "embed.cond.weight");
    let b = pvars.get(params, "embed.cond.bias");
    let tokens = linear(&mut tape, input_var, w, b);
    Ok(ConditionTokens {
        tokens: tape.value(tokens).clone(),
        view_counts: keypoints.iter().map(|k| k.len()).collect(),
        scale,
    })
}

/// Evaluates the velocity field at `(t, state)` given precomputed condition
/// tokens. Returns a K × 3 matrix of per-point velocities.
pub fn velocity_forward(
    params: &Parameters,
    t: f64,
    state: &FlowState,
    cond: &ConditionTokens,
) -> Result<Mat> {
    velocity_forward_opts(params, t, state, cond, ForwardOptions::default())
}

pub fn velocity_forward_opts(
    params: &Parameters,
    t: f64,
    state: &FlowState,
    cond: &ConditionTokens,
    opts: ForwardOptions,
) -> Result<Mat> {
    if state.view_counts != cond.view_counts {
        return Err(Error::ShapeMismatch(format!(
            "state views {:?} vs condition views {:?}",
            state.view_counts, cond.view_counts
        )));
    }
    if cond.tokens.cols != params.config().hidden {
        return Err(Error::ShapeMismatch(format!(
            "condition tokens width {} vs hidden {}",
            cond.tokens.cols,
            params.config().hidden
        )));
    }
    let mut tape = Tape::new(params.len());
    let pvars = push_params(&mut tape, params);
    let cond_var = tape.constant(cond.tokens.clone());
    let out = forward_graph(
        &mut tape,
        params,
        &pvars,
        t,
        &state.points,
        &state.view_counts,
        cond_var,
        opts,
    );
    Ok(tape.value(out).clone())
}

/// One training example for the flow-matching loss.
#[derive(Debug, Clone)]
pub struct CfmSample {
    /// Registered canonical keypoints (the flow target).
    pub x0: Vec<Point3<f64>>,
    /// Gaussian noise endpoint.
    pub x1: Vec<Point3<f64>>,
    pub view_counts: Vec<usize>,
    /// Raw conditioning rows from [`condition_input`].
    pub cond_input: Mat,
    /// Flow time for this sample.
    pub t: f64,
}

impl CfmSample {
    pub fn token_count(&self) -> usize {
        self.x0.len()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let total: usize = self.view_counts.iter().sum();
        if self.x0.len() != total || self.x1.len() != total || self.cond_input.rows != total {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} target, {} noise, {} condition rows for {} view points",
                self.x0.len(),
                self.x1.len(),
                self.cond_input.rows,
                total
            )));
        }
        if self.cond_input.cols != cfg.condition_input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "condition rows have width {}, expected {}",
                self.cond_input.cols,
                cfg.condition_input_dim()
            )));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::ShapeMismatch(format!("t {} outside [0, 1]", self.t)));
        }
        Ok(())
    }
}

/// Forward + backward of one sample; returns (mse, element count, gradients).
fn sample_loss_and_grads(params: &Parameters, sample: &CfmSample) -> Result<(f64, usize, Vec<Mat>)> {
    let cfg = params.config();
    sample.validate(cfg)?;
    let t = sample.t;
    // X(t) on the straight path, and the constant path velocity X(1) − X(0).
    let xt: Vec<Point3<f64>> = sample
        .x0
        .iter()
        .zip(sample.x1.iter())
        .map(|(a, b)| Point3::from(a.coords * (1.0 - t) + b.coords * t))
        .collect();
    let mut target = Mat::zeros(sample.x0.len(), 3);
    for (i, (a, b)) in sample.x0.iter().zip(sample.x1.iter()).enumerate() {
        let v = b - a;
        target.row_mut(i).copy_from_slice(&[v.x, v.y, v.z]);
    }

    let mut tape = Tape::new(params.len());
    let pvars = push_params(&mut tape, params);
    let cond_in = tape.constant(sample.cond_input.clone());
    let w_cd = pvars.get(params, "embed.cond.weight");
    let b_cd = pvars.get(params, "embed.cond.bias");
    let cond_tokens = linear(&mut tape, cond_in, w_cd, b_cd);
    let velocity = forward_graph(
        &mut tape,
        params,
        &pvars,
        t,
        &xt,
        &sample.view_counts,
        cond_tokens,
        ForwardOptions::default(),
    );
    let elements = sample.x0.len() * 3;
    let loss = tape.mean_squared_to(velocity, target);
    let loss_value = tape.value(loss).data[0];
    let grads = tape.backward(loss, &params.shapes());
    Ok((loss_value, elements, grads))
}

/// Mean squared error between the predicted velocity field and the path
/// velocity over a batch, with exact gradients for every parameter.
///
/// The batch loss is the global MSE over all points of all samples; per-sample
/// work runs in parallel and is reduced in sample order, so the result is
/// deterministic.
pub fn cfm_loss(params: &Parameters, batch: &[CfmSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let results = par::map(batch, |sample| sample_loss_and_grads(params, sample));
    let mut total_elements = 0usize;
    let mut partials = Vec::with_capacity(results.len());
    for r in results {
        let (loss, elements, grads) = r?;
        total_elements += elements;
        partials.push((loss, elements, grads));
    }
    let mut loss_total = 0.0;
    let mut grads_total = Gradients::zeros_like(params);
    for (loss, elements, grads) in partials {
        let weight = elements as f64 / total_elements as f64;
        loss_total += loss * weight;
        grads_total.add_scaled(&Gradients::from_tensors(grads), weight);
    }
    Ok((loss_total, grads_total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            blocks: 2,
            hidden: 16,
            heads: 2,
            fourier_frequencies: 2,
            time_embed_dim: 8,
            descriptor_dim: 4,
            parameter_init_seed: 3,
        }
    }

    fn tiny_inputs(
        cfg: &ModelConfig,
        counts: &[usize],
        seed: u64,
    ) -> (Vec<PointCloud>, Vec<DMatrix<f64>>) {
        let mut rng = stream(seed);
        let mut clouds = Vec::new();
        let mut descs = Vec::new();
        for &c in counts {
            let pts: Vec<[f64; 3]> = (0..c)
                .map(|_| {
                    [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ]
                })
                .collect();
            clouds.push(PointCloud::from_xyz(pts).unwrap());
            descs.push(DMatrix::from_fn(c, cfg.descriptor_dim, |_, _| {
                rng.random_range(-1.0..1.0)
            }));
        }
        (clouds, descs)
    }

    #[test]
    fn fourier_encode_zero_and_length() {
        let enc = fourier_encode(&[0.0, 0.0, 0.0], 4);
        assert_eq!(enc.len(), 3 + 6 * 4);
        assert!(enc[..3].iter().all(|&v| v == 0.0));
        // sin blocks zero, cos blocks one.
        for k in 0..4 {
            let base = 3 + 6 * k;
            assert!(enc[base..base + 3].iter().all(|&v| v == 0.0));
            assert!(enc[base + 3..base + 6].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn forward_output_shape_and_determinism() {
        let cfg = tiny_config();
        let params = Parameters::init(&cfg).unwrap();
        let (clouds, descs) = tiny_inputs(&cfg, &[5, 7], 11);
        let cond = embed_condition(&params, &clouds, &descs, 2.0).unwrap();
        assert_eq!(cond.tokens.rows, 12);

        let mut points = Vec::new();
        for c in &clouds {
            points.extend_from_slice(c.points());
        }
        let state = FlowState::new(points, 0.5, vec![5, 7]).unwrap();
        let v1 = velocity_forward(&params, 0.5, &state, &cond).unwrap();
        let v2 = velocity_forward(&params, 0.5, &state, &cond).unwrap();
        assert_eq!(v1.rows, 12);
        assert_eq!(v1.cols, 3);
        assert_eq!(v1, v2);
    }

    #[test]
    fn identical_points_produce_identical_tokens() {
        let cfg = tiny_config();
        let params = Parameters::init(&cfg).unwrap();
        let cloud = PointCloud::from_xyz([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]).unwrap();
        let desc = DMatrix::from_element(2, cfg.descriptor_dim, 0.25);
        let cond = embed_condition(&params, &[cloud], &[desc], 1.5).unwrap();
        assert_eq!(cond.tokens.row(0), cond.tokens.row(1));
    }

    #[test]
    fn scale_pathway_is_live() {
        let cfg = tiny_config();
        let params = Parameters::init(&cfg).unwrap();
        let (clouds, descs) = tiny_inputs(&cfg, &[4], 13);
        let a = embed_condition(&params, &clouds, &descs, 1.0).unwrap();
        let b = embed_condition(&params, &clouds, &descs, 2.0).unwrap();
        let diff: f64 = a
            .tokens
            .data
            .iter()
            .zip(b.tokens.data.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.0, "scale change must alter the tokens");
    }

    #[test]
    fn timestep_endpoints() {
        // u = 0 maps to t = 0; u → 1 maps to t → 1 (sin²(π/2) = 1).
        assert_eq!((std::f64::consts::FRAC_PI_2 * 0.0).sin().powi(2), 0.0);
        let end = (std::f64::consts::FRAC_PI_2 * 1.0).sin().powi(2);
        assert!((end - 1.0).abs() < 1e-15);
        // Draws stay in [0, 1].
        let mut rng = stream(99);
        for _ in 0..1000 {
            let t = sample_timestep(&mut rng);
            assert!((0.0..=1.0).contains(&t));
        }
    }

    #[test]
    fn cfm_loss_is_nonnegative_and_rejects_bad_shapes() {
        let cfg = tiny_config();
        let params = Parameters::init(&cfg).unwrap();
        let (clouds, descs) = tiny_inputs(&cfg, &[4, 4], 17);
        let cond_input = condition_input(&clouds, &descs, 1.0, &cfg).unwrap();
        let mut rng = stream(5);
        let pts: Vec<Point3<f64>> = (0..8)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let sample = CfmSample {
            x0: pts.clone(),
            x1: pts.iter().map(|p| Point3::from(p.coords * 0.5)).collect(),
            view_counts: vec![4, 4],
            cond_input,
            t: 0.3,
        };
        let (loss, grads) = cfm_loss(&params, &[sample.clone()]).unwrap();
        assert!(loss >= 0.0);
        assert!(grads.mirrors(&params));

        let mut bad = sample;
        bad.view_counts = vec![4, 3];
        assert!(cfm_loss(&params, &[bad]).is_err());
    }
}
