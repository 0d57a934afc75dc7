//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records how to push an upstream gradient back to its inputs. Leaves
//! created with [`Graph::param`] receive gradients, leaves created with
//! [`Graph::constant`] do not, and nothing downstream of constants alone is
//! visited during the backward sweep.
//!
//! The tape is meant to be rebuilt for every evaluation; it holds all
//! intermediate values until dropped.

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Axis, LOG_CLAMP, MIN_ROW_NORM};
use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a 1×cols row to every row.
    AddRow(Var, Var),
    /// `scale · x + shift`
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: Axis,
        tau: f64,
    },
    NormalizeCols {
        x: Var,
        denom: Vec<f64>,
        floored: Vec<bool>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        p: Var,
        target: Matrix,
    },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape("matmul_t", va.shape(), vb.shape()));
        }
        let value = va.matmul_t(vb);
        Ok(self.push_op(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push_op(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the 1×cols row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(r));
        if vr.shape() != (1, va.cols()) {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(vr.data()) {
                *v += b;
            }
        }
        Ok(self.push_op(value, Op::AddRow(a, r), &[a, r]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        self.push_op(value, Op::Affine(a, scale), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_op(value, Op::Exp(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: Axis, tau: f64) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis, tau)?;
        Ok(self.push_op(value, Op::Softmax { x, axis, tau }, &[x]))
    }

    /// Divides each column by its sum, floored at `eps`.
    pub fn normalize_cols(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let sums = vx.column_sums();
        let floored: Vec<bool> = sums.data().iter().map(|&s| s < eps).collect();
        let denom: Vec<f64> = sums.data().iter().map(|&s| s.max(eps)).collect();
        let mut value = vx.clone();
        for i in 0..value.rows() {
            for (v, d) in value.row_mut(i).iter_mut().zip(&denom) {
                *v /= d;
            }
        }
        self.push_op(value, Op::NormalizeCols { x, denom, floored }, &[x])
    }

    /// Divides each row by its sum, floored at `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.transpose(x);
        let n = self.normalize_cols(t, eps);
        self.transpose(n)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut norms = Vec::with_capacity(vx.rows());
        for (i, row) in vx.iter_rows().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= MIN_ROW_NORM {
                return Err(Error::DegenerateRow {
                    op: "l2_normalize_rows",
                    row: i,
                });
            }
            norms.push(n);
        }
        let mut value = vx.clone();
        for (i, n) in norms.iter().enumerate() {
            for v in value.row_mut(i) {
                *v /= n;
            }
        }
        Ok(self.push_op(value, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        // Validates shapes and eps.
        ops::layer_norm_rows(&Matrix::zeros(1, vx.cols()), vg, vb, eps)?;
        let (value, xhat, inv_std) = ops::layer_norm_parts(vx, vg, vb, eps);
        Ok(self.push_op(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Row-mean cross-entropy of `p` against a fixed target distribution.
    pub fn cross_entropy_rows(&mut self, p: Var, target: Matrix) -> Result<Var> {
        let value = ops::cross_entropy_rows(self.value(p), &target)?;
        Ok(self.push_op(Matrix::filled(1, 1, value), Op::CrossEntropy { p, target }, &[p]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::shape("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let mut push = |v: Var, m: Matrix| {
                if self.nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&m),
                        slot @ None => *slot = Some(m),
                    }
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    push(*a, g.matmul_t(self.value(*b)));
                    push(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    push(*a, g.matmul_unchecked(self.value(*b)));
                    push(*b, g.t_matmul(self.value(*a)));
                }
                Op::Transpose(a) => push(*a, g.transpose()),
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g);
                }
                Op::Sub(a, b) => {
                    push(*a, g.clone());
                    push(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    push(*a, hadamard(&g, self.value(*b)));
                    push(*b, hadamard(&g, self.value(*a)));
                }
                Op::AddRow(a, r) => {
                    push(*r, g.column_sums());
                    push(*a, g);
                }
                Op::Affine(a, s) => push(*a, g.scale(*s)),
                Op::Sigmoid(a) => push(*a, zip(&g, y, |g, y| g * y * (1.0 - y))),
                Op::Tanh(a) => push(*a, zip(&g, y, |g, y| g * (1.0 - y * y))),
                Op::Exp(a) => push(*a, hadamard(&g, y)),
                Op::Softmax { x, axis, tau } => {
                    let dx = match axis {
                        Axis::Rows => softmax_rows_backward(&g, y, *tau),
                        Axis::Cols => {
                            softmax_rows_backward(&g.transpose(), &y.transpose(), *tau).transpose()
                        }
                    };
                    push(*x, dx);
                }
                Op::NormalizeCols { x, denom, floored } => {
                    let gy = hadamard(&g, y).column_sums();
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        for (k, v) in dx.row_mut(r).iter_mut().enumerate() {
                            let shift = if floored[k] { 0.0 } else { gy.data()[k] };
                            *v = (*v - shift) / denom[k];
                        }
                    }
                    push(*x, dx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let mut dx = g;
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let dot: f64 = dx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (v, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *v = (*v - yv * dot) / n;
                        }
                    }
                    push(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain).data();
                    push(*gain, hadamard(&g, xhat).column_sums());
                    push(*bias, g.column_sums());
                    let cols = g.cols() as f64;
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let xr = xhat.row(r);
                        let row = dx.row_mut(r);
                        for (v, gv) in row.iter_mut().zip(gain_v) {
                            *v *= gv;
                        }
                        let mean = row.iter().sum::<f64>() / cols;
                        let mean_x = row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for (v, xv) in row.iter_mut().zip(xr) {
                            *v = inv_std[r] * (*v - mean - xv * mean_x);
                        }
                    }
                    push(*x, dx);
                }
                Op::CrossEntropy { p, target } => {
                    let vp = self.value(*p);
                    let scale = g.data()[0] / vp.rows() as f64;
                    let dp = zip(vp, target, |pv, t| {
                        if t == 0.0 || pv < LOG_CLAMP {
                            0.0
                        } else {
                            -scale * t / pv
                        }
                    });
                    push(*p, dp);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    push(*a, Matrix::filled(r, c, g.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip(a, b, |x, y| x * y)
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    a.zip_map(b, f).expect("shapes checked in forward pass")
}

fn softmax_rows_backward(g: &Matrix, y: &Matrix, tau: f64) -> Matrix {
    let mut dx = g.clone();
    for r in 0..dx.rows() {
        let yr = y.row(r);
        let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
        for (v, yv) in dx.row_mut(r).iter_mut().zip(yr) {
            *v = yv * (*v - dot) / tau;
        }
    }
    dx
}

/// Gradients of one backward sweep, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a parameter leaf, or `None` if it does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, zero-filled when it does not influence the loss.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = graph.shape(v);
            Matrix::zeros(r, c)
        })
    }
}
