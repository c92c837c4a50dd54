//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] lives for one forward pass. Every op appends a node whose inputs
//! were recorded earlier, so the node list is already in topological order and
//! [`Tape::backward`] simply walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to scores inside [`Tape::binary_cross_entropy`].
pub const BCE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add(Var),
    Sub(Var),
    Mul(Var),
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Bce { scores: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf. Gradients are kept for it only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value.detached(), Op::Leaf, requires_grad)
    }

    /// Records a leaf that mirrors a parameter's `requires_grad` flag.
    pub fn param(&mut self, p: &Tensor) -> Var {
        self.leaf(p.detached(), p.requires_grad())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn finish(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let tracked = inputs.iter().any(|v| self.tracked(*v));
        Ok(self.push(value, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.finish(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        self.finish(out, Op::AddRow(a, bias), &[a, bias], "add_row")
    }

    pub fn elementwise(&mut self, a: Var, kind: Elementwise) -> Result<Var> {
        match kind {
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Add(b) => self.add(a, b),
            Elementwise::Sub(b) => self.sub(a, b),
            Elementwise::Mul(b) => self.mul(a, b),
            Elementwise::Scale(s) => self.scale(a, s),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.finish(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.finish(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.finish(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.finish(out, Op::Scale(a, s), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.finish(out, Op::Relu(a), &[a], "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.finish(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.finish(Tensor::from_parts(1, 1, vec![total]), Op::Sum(a), &[a], "sum")
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (rows, cols) = x.shape();
        if labels.len() != rows || rows == 0 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: x.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Label { label: bad, limit: cols });
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (row, &label) in x.row_iter().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss -= row[label] - max - log_denom;
            probs.extend(row.iter().map(|v| (v - max).exp() / denom));
        }
        loss /= rows as f64;
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.finish(Tensor::from_parts(1, 1, vec![loss]), op, &[logits], "softmax_cross_entropy")
    }

    /// Mean binary cross-entropy of `scores` (one column) against 0/1 `labels`.
    /// Scores are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn binary_cross_entropy(&mut self, scores: Var, labels: &[f64]) -> Result<Var> {
        let s = self.value(scores);
        if labels.len() != s.len() || s.is_empty() {
            return Err(Error::Dimension {
                op: "binary_cross_entropy",
                left: s.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Label {
                label: bad as usize,
                limit: 2,
            });
        }
        let n = labels.len() as f64;
        let loss = s
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce {
            scores,
            labels: labels.to_vec(),
        };
        self.finish(Tensor::from_parts(1, 1, vec![loss]), op, &[scores], "binary_cross_entropy")
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`, visiting nodes in reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                left: shape,
                right: (1, 1),
            });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].tracked {
                continue;
            }
            let contributions = self.local_grads(idx, &upstream);
            self.grads[idx] = Some(upstream);
            for (target, g) in contributions {
                self.accumulate(target, g);
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, up: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let dc = Tensor::from_parts(node.value.rows(), node.value.cols(), up.to_vec());
                let mut out = Vec::with_capacity(2);
                if self.tracked(*a) {
                    out.push((*a, dc.matmul(&bv.transpose()).expect("shape").into_data()));
                }
                if self.tracked(*b) {
                    out.push((*b, av.transpose().matmul(&dc).expect("shape").into_data()));
                }
                out
            }
            Op::AddRow(a, bias) => {
                let cols = node.value.cols();
                let mut db = vec![0.0; cols];
                for chunk in up.chunks_exact(cols.max(1)) {
                    db.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                vec![(*a, up.to_vec()), (*bias, db)]
            }
            Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
            Op::Sub(a, b) => vec![(*a, up.to_vec()), (*b, up.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                vec![
                    (*a, up.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (*b, up.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, up.iter().map(|g| g * s).collect())],
            Op::Relu(a) => {
                let av = self.value(*a).data();
                vec![(*a, up.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, up.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![up[0]; self.value(*a).len()])],
            Op::SoftmaxCe { logits, labels, probs } => {
                let cols = self.value(*logits).cols();
                let n = labels.len() as f64;
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * cols + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= up[0] / n);
                vec![(*logits, g)]
            }
            Op::Bce { scores, labels } => {
                let n = labels.len() as f64;
                let s = self.value(*scores).data();
                let g = s
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        up[0] * (p - y) / (p * (1.0 - p)) / n
                    })
                    .collect();
                vec![(*scores, g)]
            }
        }
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
