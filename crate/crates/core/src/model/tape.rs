//! Minimal reverse-mode autodiff over [`Mat`] values.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; the
//! backward pass walks the list in reverse, accumulating gradients into
//! parameter slots. Control flow is data-independent, so forward values and
//! gradients are bit-deterministic for fixed inputs.

use super::mat::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    /// Leaf whose gradient is harvested into the given parameter slot.
    Param { slot: usize },
    MatMul { a: Var, b: Var },
    /// `a @ bᵀ`
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `a + row` broadcast over rows; `row` is 1 × cols.
    AddRow { a: Var, row: Var },
    /// `a ⊙ row` broadcast over rows.
    MulRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    NarrowRows { a: Var, start: usize },
    NarrowCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SoftmaxRows { a: Var },
    /// Row-wise `(x − mean) / sqrt(var + eps)`, no affine.
    LayerNormRows { a: Var, inv_std: Vec<f64> },
    Silu { a: Var },
    Gelu { a: Var },
    /// 1×1 mean of `(a − target)²` over all elements.
    MeanSquaredTo { a: Var, target: Mat },
}

struct Node {
    op: Op,
    value: Mat,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_count: usize,
}

impl Tape {
    pub fn new(param_count: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_count,
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, slot: usize, value: Mat) -> Var {
        assert!(slot < self.param_count);
        self.push(Op::Param { slot }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let mut out = Mat::zeros(self.value(a).rows, self.value(b).cols);
        gemm_nn_acc(&mut out, self.value(a), self.value(b));
        self.push(Op::MatMul { a, b }, out)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let mut out = Mat::zeros(self.value(a).rows, self.value(b).rows);
        gemm_nt_acc(&mut out, self.value(a), self.value(b));
        self.push(Op::MatMulNt { a, b }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let data = va.data.iter().zip(vb.data.iter()).map(|(x, y)| x + y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Add { a, b }, out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols);
        let mut out = va.clone();
        for i in 0..out.rows {
            for (x, r) in out.row_mut(i).iter_mut().zip(vr.data.iter()) {
                *x += r;
            }
        }
        self.push(Op::AddRow { a, row }, out)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols);
        let mut out = va.clone();
        for i in 0..out.rows {
            for (x, r) in out.row_mut(i).iter_mut().zip(vr.data.iter()) {
                *x *= r;
            }
        }
        self.push(Op::MulRow { a, row }, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols));
        let data = va.data.iter().zip(vb.data.iter()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Mul { a, b }, out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scaled(factor);
        self.push(Op::Scale { a, factor }, out)
    }

    pub fn narrow_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows);
        let out = Mat::from_vec(
            len,
            va.cols,
            va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        );
        self.push(Op::NarrowRows { a, start }, out)
    }

    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols);
        let mut out = Mat::zeros(va.rows, len);
        for i in 0..va.rows {
            out.row_mut(i).copy_from_slice(&va.row(i)[start..start + len]);
        }
        self.push(Op::NarrowCols { a, start }, out)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in &parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols);
            data.extend_from_slice(&vp.data);
        }
        let out = Mat::from_vec(rows, cols, data);
        self.push(Op::ConcatRows { parts }, out)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in &parts {
                let vp = &self.nodes[p.0].value;
                assert_eq!(vp.rows, rows);
                out.row_mut(i)[offset..offset + vp.cols].copy_from_slice(vp.row(i));
                offset += vp.cols;
            }
        }
        self.push(Op::ConcatCols { parts }, out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxRows { a }, out)
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols as f64;
        let mut out = va.clone();
        let mut inv_stds = Vec::with_capacity(va.rows);
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
            inv_stds.push(inv_std);
        }
        self.push(
            Op::LayerNormRows {
                a,
                inv_std: inv_stds,
            },
            out,
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * sigmoid(x)).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Silu { a }, out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| gelu_tanh(x)).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        self.push(Op::Gelu { a }, out)
    }

    pub fn mean_squared_to(&mut self, a: Var, target: Mat) -> Var {
        let va = self.value(a);
        assert_eq!((va.rows, va.cols), (target.rows, target.cols));
        let n = (va.rows * va.cols) as f64;
        let mse = va
            .data
            .iter()
            .zip(target.data.iter())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        let out = Mat::from_vec(1, 1, vec![mse]);
        self.push(Op::MeanSquaredTo { a, target }, out)
    }

    /// Runs the backward pass from a 1×1 loss node and returns the gradient
    /// for every parameter slot (zero matrices for untouched slots).
    pub fn backward(&self, loss: Var, param_shapes: &[(usize, usize)]) -> Vec<Mat> {
        assert_eq!(param_shapes.len(), self.param_count);
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "loss must be scalar");

        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut param_grads: Vec<Mat> = param_shapes
            .iter()
            .map(|&(r, c)| Mat::zeros(r, c))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param { slot } => {
                    param_grads[*slot].add_scaled_in_place(&grad, 1.0);
                }
                Op::MatMul { a, b } => {
                    // dA += dC @ Bᵀ ; dB += Aᵀ @ dC
                    let (da, db) = {
                        let va = self.value(*a);
                        let vb = self.value(*b);
                        let mut da = Mat::zeros(va.rows, va.cols);
                        gemm_nt_acc(&mut da, &grad, vb);
                        let mut db = Mat::zeros(vb.rows, vb.cols);
                        gemm_tn_acc(&mut db, va, &grad);
                        (da, db)
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt { a, b } => {
                    // C = A @ Bᵀ: dA += dC @ B ; dB += dCᵀ @ A
                    let (da, db) = {
                        let va = self.value(*a);
                        let vb = self.value(*b);
                        let mut da = Mat::zeros(va.rows, va.cols);
                        gemm_nn_acc(&mut da, &grad, vb);
                        let mut db = Mat::zeros(vb.rows, vb.cols);
                        gemm_tn_acc(&mut db, &grad, va);
                        (da, db)
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::AddRow { a, row } => {
                    let mut drow = Mat::zeros(1, grad.cols);
                    for i in 0..grad.rows {
                        for (dr, g) in drow.row_mut(0).iter_mut().zip(grad.row(i)) {
                            *dr += g;
                        }
                    }
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *row, drow);
                }
                Op::MulRow { a, row } => {
                    let va = self.value(*a);
                    let vr = self.value(*row);
                    let mut da = grad.clone();
                    let mut drow = Mat::zeros(1, grad.cols);
                    for i in 0..grad.rows {
                        let g = grad.row(i);
                        let ar = va.row(i);
                        for j in 0..grad.cols {
                            *da.at_mut(i, j) = g[j] * vr.data[j];
                            drow.data[j] += g[j] * ar[j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *row, drow);
                }
                Op::Mul { a, b } => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let da = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(vb.data.iter()).map(|(g, y)| g * y).collect(),
                    );
                    let db = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(va.data.iter()).map(|(g, x)| g * x).collect(),
                    );
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { a, factor } => {
                    accumulate(&mut grads, *a, grad.scaled(*factor));
                }
                Op::NarrowRows { a, start } => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows, va.cols);
                    da.data[start * va.cols..(start + grad.rows) * va.cols]
                        .copy_from_slice(&grad.data);
                    accumulate(&mut grads, *a, da);
                }
                Op::NarrowCols { a, start } => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows, va.cols);
                    for i in 0..grad.rows {
                        da.row_mut(i)[*start..start + grad.cols].copy_from_slice(grad.row(i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let cols = self.value(p).cols;
                        let dp = Mat::from_vec(
                            rows,
                            cols,
                            grad.data[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        offset += rows;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let mut dp = Mat::zeros(vp.rows, vp.cols);
                        for i in 0..vp.rows {
                            dp.row_mut(i)
                                .copy_from_slice(&grad.row(i)[offset..offset + vp.cols]);
                        }
                        offset += vp.cols;
                        accumulate(&mut grads, p, dp);
                    }
                }
                Op::SoftmaxRows { a } => {
                    // dx = P ⊙ (dP − rowsum(dP ⊙ P))
                    let p = &self.nodes[idx].value;
                    let mut da = Mat::zeros(p.rows, p.cols);
                    for i in 0..p.rows {
                        let pi = p.row(i);
                        let gi = grad.row(i);
                        let dot: f64 = pi.iter().zip(gi.iter()).map(|(x, g)| x * g).sum();
                        for j in 0..p.cols {
                            *da.at_mut(i, j) = pi[j] * (gi[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNormRows { a, inv_std } => {
                    // dx = inv_std · (dy − mean(dy) − x̂ · mean(dy ⊙ x̂))
                    let y = &self.nodes[idx].value;
                    let n = y.cols as f64;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yi = y.row(i);
                        let gi = grad.row(i);
                        let mean_g = gi.iter().sum::<f64>() / n;
                        let mean_gy: f64 =
                            gi.iter().zip(yi.iter()).map(|(g, x)| g * x).sum::<f64>() / n;
                        for j in 0..y.cols {
                            *da.at_mut(i, j) = inv_std[i] * (gi[j] - mean_g - yi[j] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Silu { a } => {
                    let va = self.value(*a);
                    let da = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data
                            .iter()
                            .zip(va.data.iter())
                            .map(|(g, &x)| {
                                let s = sigmoid(x);
                                g * (s * (1.0 + x * (1.0 - s)))
                            })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu { a } => {
                    let va = self.value(*a);
                    let da = Mat::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data
                            .iter()
                            .zip(va.data.iter())
                            .map(|(g, &x)| g * gelu_tanh_derivative(x))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanSquaredTo { a, target } => {
                    let va = self.value(*a);
                    let n = (va.rows * va.cols) as f64;
                    let g = grad.data[0];
                    let da = Mat::from_vec(
                        va.rows,
                        va.cols,
                        va.data
                            .iter()
                            .zip(target.data.iter())
                            .map(|(x, t)| g * 2.0 * (x - t) / n)
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Mat>], var: Var, delta: Mat) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_scaled_in_place(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

#[inline]
fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_tanh_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
