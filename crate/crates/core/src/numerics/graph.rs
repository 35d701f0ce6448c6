//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes in reverse, so a fresh graph is built for each forward pass.

use super::tensor::{permute_map, split_axis, MatmulPlan, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Guard below which a row norm counts as zero.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var, MatmulPlan),
    Tanh(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LayerNorm(Var, f64),
    Center(Var),
    Unit(Var),
    Squash(Var),
    SumLast(Var),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// `b` may match `a` or be a trailing suffix of it (broadcast over leading dims).
fn suffix_broadcast(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return shape_err(format!("{what}: {sb:?} does not broadcast onto {sa:?}"));
    }
    Ok(())
}

fn row_len(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn add_into(acc: &mut Option<Tensor>, delta: Tensor) {
    match acc {
        Some(t) => {
            let mut data = std::mem::take(t).into_data();
            for (a, d) in data.iter_mut().zip(delta.data()) {
                *a += d;
            }
            *t = Tensor::from_parts(delta.shape().to_vec(), data);
        }
        None => *acc = Some(delta),
    }
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::scalar(0.0)
    }
}

/// Squash scale `a(n) = n² / ((1 + n²)(n + ε))` and `a'(n) / n`.
fn squash_coeffs(n: f64) -> (f64, f64) {
    let n2 = n * n;
    let den = (1.0 + n2) * (n + NORM_GUARD);
    let a = n2 / den;
    let da_over_n = (2.0 * (n + NORM_GUARD) - n * (1.0 + n2)) / (den * den);
    (a, da_over_n)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let nb = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % nb]))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    /// Element-wise sum; `b` may broadcast over leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        suffix_broadcast(self.value(a), self.value(b), "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        suffix_broadcast(self.value(a), self.value(b), "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        suffix_broadcast(self.value(a), self.value(b), "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let out = plan.forward(self.value(a).data(), self.value(b).data());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b, plan), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Clips into `[lo, hi]`; the gradient passes only where unclipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a, axis), ng))
    }

    fn row_op(&mut self, a: Var, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Var {
        let t = self.value(a);
        let d = row_len(t);
        let mut out = vec![0.0; t.len()];
        for (x, y) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            f(x, y);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        self.row_op(a, Op::LayerNorm(a, eps), |x, y| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, v) in y.iter_mut().zip(x) {
                *o = (v - mean) * rstd;
            }
        })
    }

    /// Subtracts each last-axis row's mean.
    pub fn center(&mut self, a: Var) -> Var {
        self.row_op(a, Op::Center(a), |x, y| {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            for (o, v) in y.iter_mut().zip(x) {
                *o = v - mean;
            }
        })
    }

    /// Scales each last-axis row to unit norm; rows with norm below
    /// [`NORM_GUARD`] map to zero.
    pub fn unit(&mut self, a: Var) -> Var {
        self.row_op(a, Op::Unit(a), |x, y| {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n >= NORM_GUARD {
                for (o, v) in y.iter_mut().zip(x) {
                    *o = v / n;
                }
            }
        })
    }

    /// Capsule squash of each last-axis row: `‖t‖²/(1+‖t‖²) · t/(‖t‖+ε)`.
    pub fn squash(&mut self, a: Var) -> Var {
        self.row_op(a, Op::Squash(a), |x, y| {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (s, _) = squash_coeffs(n);
            for (o, v) in y.iter_mut().zip(x) {
                *o = s * v;
            }
        })
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = row_len(t);
        let data: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
        let out = Tensor::from_parts(shape, data);
        let ng = self.needs(a);
        self.push(out, Op::SumLast(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (shape, map) = permute_map(t.shape(), perm)?;
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts(shape, data);
        let ng = self.needs(a);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return shape_err(format!("concat: {s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec(), axis),
            ng,
        ))
    }

    /// Picks rows of the leading axis (embedding lookup when `a` is a table).
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 || rows.is_empty() {
            return shape_err("index_select needs rank >= 1 and at least one row");
        }
        let n = t.shape()[0];
        let row: usize = t.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= n {
                return shape_err(format!("row {r} out of range for {n} rows"));
            }
            data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect(a, rows.to_vec()),
            ng,
        ))
    }

    /// Weighted mean cross-entropy of `logits` rows against integer targets.
    /// Rows with weight 0 (padding) contribute nothing; all-zero weights give 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != targets.len() || targets.len() != weights.len() {
            return shape_err(format!(
                "cross_entropy: logits {:?}, {} targets, {} weights",
                t.shape(),
                targets.len(),
                weights.len()
            ));
        }
        let v = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return shape_err(format!("target {bad} outside vocabulary of {v}"));
        }
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for ((row, &y), &w) in t.rows().zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[y]);
        }
        let loss = if wsum > 0.0 { loss / wsum } else { 0.0 };
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = self.value(out);
        if root.len() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", root.shape()));
        }
        if !root.all_finite() {
            return Err(Error::NonFinite("backward from non-finite output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(root.shape(), 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut send = |v: Var, g: Tensor| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                send(*a, dy.clone());
                if self.needs(*b) {
                    let tb = self.value(*b);
                    send(*b, reduce_to(dy, tb.shape(), |_, g| sign * g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.len();
                if self.needs(*a) {
                    let d = dy
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * tb.data()[i % nb])
                        .collect();
                    send(*a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.needs(*b) {
                    send(*b, reduce_to(dy, tb.shape(), |i, g| g * ta.data()[i]));
                }
            }
            Op::Scale(a, s) => send(*a, dy.map(|g| g * s)),
            Op::MatMul(a, b, plan) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; ta.len()];
                    plan.grad_a(dy.data(), tb.data(), &mut da);
                    send(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; tb.len()];
                    plan.grad_b(ta.data(), dy.data(), &mut db);
                    send(*b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            Op::Tanh(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                send(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                send(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if (*lo..=*hi).contains(v) { *g } else { 0.0 })
                    .collect();
                send(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| dy.data()[at(k)] * y.data()[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y.data()[at(k)] * (dy.data()[at(k)] - dot);
                        }
                    }
                }
                send(*a, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                send(
                    *a,
                    self.row_grad(x, y, dy, |x, y, g, out| {
                        let n = x.len() as f64;
                        let mean = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let gm = g.iter().sum::<f64>() / n;
                        let gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for k in 0..x.len() {
                            out[k] = rstd * (g[k] - gm - y[k] * gy);
                        }
                    }),
                );
            }
            Op::Center(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    self.row_grad(x, y, dy, |_, _, g, out| {
                        let gm = g.iter().sum::<f64>() / g.len() as f64;
                        for (o, v) in out.iter_mut().zip(g) {
                            *o = v - gm;
                        }
                    }),
                );
            }
            Op::Unit(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    self.row_grad(x, y, dy, |x, y, g, out| {
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n < NORM_GUARD {
                            return;
                        }
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for k in 0..x.len() {
                            out[k] = (g[k] - y[k] * dot) / n;
                        }
                    }),
                );
            }
            Op::Squash(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    self.row_grad(x, y, dy, |x, _, g, out| {
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (s, ds) = squash_coeffs(n);
                        let dot: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum();
                        for k in 0..x.len() {
                            out[k] = s * g[k] + ds * x[k] * dot;
                        }
                    }),
                );
            }
            Op::SumLast(a) => {
                let x = self.value(*a);
                let d = row_len(x);
                let data = dy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, d))
                    .collect();
                send(*a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                send(*a, Tensor::full(x.shape(), dy.item()));
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    Tensor::from_parts(x.shape().to_vec(), dy.data().to_vec()),
                );
            }
            Op::Permute(a, perm) => {
                let x = self.value(*a);
                let (_, map) = permute_map(x.shape(), perm).expect("validated in forward");
                let mut d = vec![0.0; x.len()];
                for (o, &i) in map.iter().enumerate() {
                    d[i] = dy.data()[o];
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.shape()[*axis];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            d.extend_from_slice(&dy.data()[base..base + len * inner]);
                        }
                        send(p, Tensor::from_parts(t.shape().to_vec(), d));
                    }
                    start += len;
                }
            }
            Op::IndexSelect(a, rows) => {
                let x = self.value(*a);
                let row: usize = x.shape()[1..].iter().product();
                let mut d = vec![0.0; x.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for c in 0..row {
                        d[r * row + c] += dy.data()[k * row + c];
                    }
                }
                send(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let t = self.value(*logits);
                let v = t.shape()[1];
                let wsum: f64 = weights.iter().sum();
                let mut d = vec![0.0; t.len()];
                if wsum > 0.0 {
                    let g = dy.item() / wsum;
                    for (i, row) in t.rows().enumerate() {
                        let w = weights[i];
                        if w == 0.0 {
                            continue;
                        }
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for k in 0..v {
                            let p = (row[k] - max).exp() / z;
                            let onehot = if k == targets[i] { 1.0 } else { 0.0 };
                            d[i * v + k] = g * w * (p - onehot);
                        }
                    }
                }
                send(*logits, Tensor::from_parts(t.shape().to_vec(), d));
            }
        }
    }

    fn row_grad(
        &self,
        x: &Tensor,
        y: &Tensor,
        dy: &Tensor,
        f: impl Fn(&[f64], &[f64], &[f64], &mut [f64]),
    ) -> Tensor {
        let d = row_len(x);
        let mut out = vec![0.0; x.len()];
        for (((xr, yr), gr), or) in x
            .data()
            .chunks(d)
            .zip(y.data().chunks(d))
            .zip(dy.data().chunks(d))
            .zip(out.chunks_mut(d))
        {
            f(xr, yr, gr, or);
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }
}

/// Sums `f(i, dy[i])` onto the trailing-suffix shape `shape`.
fn reduce_to(dy: &Tensor, shape: &[usize], f: impl Fn(usize, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, &g) in dy.data().iter().enumerate() {
        out[i % n] += f(i, g);
    }
    Tensor::from_parts(shape.to_vec(), out)
}
