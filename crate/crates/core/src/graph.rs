//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every forward operation appends a node holding its value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into the parameter
//! blocks that were read through [`Graph::param`]. A graph borrows the
//! parameter store immutably, so inference and gradient evaluation never
//! mutate parameters.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MatMulAt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Softmax(Var),
    CrossEntropy(Var, usize),
    Sum(Var),
    Mean(Var),
    WeightedBce {
        logits: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter block. Repeated reads of the same block share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a × bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBt(a, b))
    }

    /// `aᵀ × b`; with `a` an `n × 1` weight column this is a weighted sum of the rows of `b`.
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_at(self.value(b));
        self.push(value, Op::MatMulAt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// Adds the `1 × c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "add_row bias shape");
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for r in 0..rows {
            for (x, bb) in value.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(&b)
            {
                *x += bb;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiplies `a` by the `1 × 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let factor = self.scalar(s);
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::ScaleBy(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(t.rows(), len, data);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(indices.len(), cols, data);
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Var {
        self.gather_rows(a, &[index])
    }

    /// Picks entry `index` of a vector-shaped variable as a `1 × 1` scalar.
    pub fn entry(&mut self, a: Var, index: usize) -> Var {
        let (rows, cols) = self.shape(a);
        if cols == 1 {
            self.gather_rows(a, &[index])
        } else {
            assert_eq!(rows, 1, "entry() expects a vector");
            self.slice_cols(a, index, 1)
        }
    }

    /// Stacks `n` copies of the `1 × c` row `a`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "repeat_rows expects a row");
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(n, t.cols(), data);
        self.push(value, Op::RepeatRows(a))
    }

    /// Softmax over every entry of `a`, keeping its shape.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.rows(), t.cols(), softmax(t.data()));
        self.push(value, Op::Softmax(a))
    }

    /// `-log softmax(logits)[target]` for a vector of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let data = self.value(logits).data();
        let value = log_sum_exp(data) - data[target];
        self.push(Tensor::scalar(value), Op::CrossEntropy(logits, target))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum();
        self.push(Tensor::scalar(value), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(value), Op::Mean(a))
    }

    /// Class-weighted binary cross-entropy on logits, averaged over classes.
    pub fn weighted_bce(&mut self, logits: Var, labels: &[f64], weights: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), labels.len(), "bce label count");
        assert_eq!(z.len(), weights.len(), "bce weight count");
        let total: f64 = z
            .iter()
            .zip(labels)
            .zip(weights)
            .map(|((&z, &y), &w)| w * bce_with_logit(z, y))
            .sum();
        let value = total / z.len() as f64;
        self.push(
            Tensor::scalar(value),
            Op::WeightedBce {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// `x Wᵀ + b` for weights stored `out × in` and bias `1 × out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul_bt(x, weight);
        self.add_row(y, bias)
    }

    /// Reverse pass from the scalar `loss`, returning gradients for every parameter block.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = self.params.zero_gradients();
        self.backward_into(loss, &mut out);
        out
    }

    pub fn backward_into(&self, loss: Var, out: &mut Gradients) {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulAt(a, b) => {
                    let ga = self.value(*b).matmul_bt(&g);
                    let gb = self.value(*a).matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (acc, x) in gb.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::row_vector(gb));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, factor) => {
                    let factor = *factor;
                    accumulate(&mut grads, *a, g.map(|x| x * factor));
                }
                Op::ScaleBy(a, s) => {
                    let factor = self.scalar(*s);
                    let gs = crate::tensor::dot(g.data(), self.value(*a).data());
                    accumulate(&mut grads, *s, Tensor::scalar(gs));
                    accumulate(&mut grads, *a, g.map(|x| x * factor));
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, Tensor::new(rows, cols, data));
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        accumulate(&mut grads, p, Tensor::new(rows, cols, data));
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for (c, x) in g.row(r).iter().enumerate() {
                            ga.set(r, start + c, *x);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for (c, x) in g.row(k).iter().enumerate() {
                            ga.data_mut()[i * cols + c] += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RepeatRows(a) => {
                    let cols = g.cols();
                    let mut ga = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (acc, x) in ga.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::row_vector(ga));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let inner = crate::tensor::dot(g.data(), y.data());
                    let ga = g.zip_map(y, |x, p| p * (x - inner));
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, target) => {
                    let upstream = g.item();
                    let t = self.value(*a);
                    let mut p = softmax(t.data());
                    p[*target] -= 1.0;
                    p.iter_mut().for_each(|x| *x *= upstream);
                    accumulate(&mut grads, *a, Tensor::new(t.rows(), t.cols(), p));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.item()));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = (rows * cols) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(rows, cols, g.item() / n));
                }
                Op::WeightedBce {
                    logits,
                    labels,
                    weights,
                } => {
                    let upstream = g.item();
                    let t = self.value(*logits);
                    let k = t.len() as f64;
                    let data = t
                        .data()
                        .iter()
                        .zip(labels)
                        .zip(weights)
                        .map(|((&z, &y), &w)| upstream * w * (sigmoid(z) - y) / k)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(t.rows(), t.cols(), data));
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax. An empty input yields an empty output.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-[y ln σ(z) + (1 - y) ln(1 - σ(z))]` without overflow.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}
