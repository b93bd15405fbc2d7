// Tape-based reverse-mode autodiff.
//
// Every op appends one node holding its value and the ids of its inputs, so the
// node vector is already a topological order. `backward` walks it in reverse
// and, for each node, pushes gradient contributions to its inputs in input
// order. No reduction depends on hashing or thread scheduling, so repeated runs
// produce bit-identical gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use std::sync::Arc;

use crate::conv::{conv_backward_lowered, conv_forward_lowered, lower, ConvConfig};
use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::pool::{global_avg_pool, max_pool_forward, PoolKind};
use crate::tensor::Tensor;

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cfg: ConvConfig,
        cols: Option<Arc<Vec<f64>>>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Max(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Concat(Vec<NodeId>),
    Gather {
        x: NodeId,
        index: Vec<Option<usize>>,
    },
    Sum(NodeId),
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        normalizer: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    /// Column matrices keyed by (input node, conv geometry), shared by every
    /// conv that reads the same input the same way and by their backward.
    lowered: HashMap<(usize, String), Arc<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            lowered: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(TensorError::Detached(id.index));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        assert_eq!(id.graph, self.id, "node from another graph");
        &self.nodes[id.index].value
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter. Repeated requests return the same node, so
    /// shared parameters accumulate their gradient in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, n);
        n
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cfg: &ConvConfig,
    ) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let key = (x.index, format!("{:?}", (&cfg.kernel, &cfg.stride, &cfg.dilation, &cfg.padding)));
        let cols = match self.lowered.get(&key) {
            Some(c) => Some(c.clone()),
            None => {
                let c = lower(self.value(x), self.value(w), cfg)?.map(Arc::new);
                if let Some(c) = &c {
                    self.lowered.insert(key, c.clone());
                }
                c
            }
        };
        let value = conv_forward_lowered(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            cfg,
            cols.as_deref().map(|c| c.as_slice()),
        )?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                cfg: cfg.clone(),
                cols,
            },
        ))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(v, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, f64::max, Op::Max(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| scale * v + shift);
        Ok(self.push(v, Op::Affine { x, scale }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.affine(x, k, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(f64::tanh);
        Ok(self.push(v, Op::Tanh(x)))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(v, Op::Relu(x)))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Relu => self.relu(x),
        }
    }

    pub fn max_pool(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.check(x)?;
        let (v, argmax) = max_pool_forward(self.value(x), window, stride)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = global_avg_pool(self.value(x));
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// `window`/`stride` are ignored for global average pooling.
    pub fn pool(&mut self, x: NodeId, kind: PoolKind, window: usize, stride: usize) -> Result<NodeId> {
        match kind {
            PoolKind::Max => self.max_pool(x, window, stride),
            PoolKind::GlobalAverage => self.global_avg_pool(x),
        }
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&values)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// `out[i] = x[index[i]]`, or 0 where the index is `None`.
    pub fn gather(
        &mut self,
        x: NodeId,
        index: Vec<Option<usize>>,
        shape: &[usize],
    ) -> Result<NodeId> {
        self.check(x)?;
        let src = self.value(x).data();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= src.len()) {
            return shape_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Gather { x, index }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(v, Op::Sum(x)))
    }

    /// `sum(x * c)` for a constant tensor `c`; the standard probe for gradient checks.
    pub fn dot_const(&mut self, x: NodeId, c: Tensor) -> Result<NodeId> {
        let c = self.input(c);
        let p = self.mul(x, c)?;
        self.sum(p)
    }

    /// Weighted softmax cross-entropy over the trailing class axis:
    /// `sum_i weights[i] * -log softmax(logits_i)[targets[i]] / normalizer`.
    /// Rows with a `None` target contribute nothing, value or gradient.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        normalizer: f64,
    ) -> Result<NodeId> {
        self.check(logits)?;
        let l = self.value(logits);
        let classes = l.channels();
        let rows = l.len() / classes;
        if targets.len() != rows || weights.len() != rows {
            return shape_err(format!(
                "{rows} logit rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= classes) {
            return shape_err(format!("target class {t} >= {classes}"));
        }
        if !(normalizer > 0.0) {
            return Err(TensorError::InvalidConfig(
                "cross-entropy normalizer must be positive".into(),
            ));
        }
        let mut total = 0.0;
        for (i, row) in l.data().chunks_exact(classes).enumerate() {
            if let Some(t) = targets[i] {
                total += weights[i] * (log_sum_exp(row) - row[t]);
            }
        }
        let v = Tensor::scalar(total / normalizer);
        Ok(self.push(
            v,
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                normalizer,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.index].value;
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Conv { x, w, b, cfg, cols } => {
                    let cg = conv_backward_lowered(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        cfg,
                        &g,
                        cols.as_deref().map(|c| c.as_slice()),
                    )?;
                    accumulate(&mut grads, *x, cg.input);
                    accumulate(&mut grads, *w, cg.weights);
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Max(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for k in 0..g.len() {
                        if va[k] >= vb[k] {
                            gb.data_mut()[k] = 0.0;
                        } else {
                            ga.data_mut()[k] = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine { x, scale } => accumulate(&mut grads, *x, g.scale(*scale)),
                Op::Sigmoid(x) => {
                    let d = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut grads, *x, d);
                }
                Op::Relu(x) => {
                    let d = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, d);
                }
                Op::MaxPool { x, argmax } => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let dd = d.data_mut();
                    for (k, &src) in argmax.iter().enumerate() {
                        dd[src] += g.data()[k];
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::GlobalAvgPool(x) => {
                    // Each output site is the mean of all input sites.
                    accumulate(&mut grads, *x, global_avg_pool(&g));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).channels();
                        accumulate(&mut grads, p, g.channel_slice(start, c)?);
                        start += c;
                    }
                }
                Op::Gather { x, index } => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    let dd = d.data_mut();
                    for (k, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            dd[*s] += g.data()[k];
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let d = Tensor::full(self.value(*x).shape(), g.item());
                    accumulate(&mut grads, *x, d);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    normalizer,
                } => {
                    let l = self.value(*logits);
                    let classes = l.channels();
                    let mut d = Tensor::zeros(l.shape());
                    let upstream = g.item() / normalizer;
                    for (r, (row, out)) in l
                        .data()
                        .chunks_exact(classes)
                        .zip(d.data_mut().chunks_exact_mut(classes))
                        .enumerate()
                    {
                        let Some(t) = targets[r] else { continue };
                        let k = upstream * weights[r];
                        let lse = log_sum_exp(row);
                        for (c, (o, &v)) in out.iter_mut().zip(row).enumerate() {
                            let p = (v - lse).exp();
                            *o = k * (p - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
            params: self.params.iter().map(|(&p, &n)| (p, n.index)).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.index] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape is fixed by the forward pass"),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

/// Result of a reverse sweep: one optional gradient per graph node.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` if the loss does not depend on it.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        if node.graph != self.graph {
            return None;
        }
        self.grads.get(node.index).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradients keyed by parameter name, in store order.
    pub fn named<'a>(&'a self, store: &'a ParamStore) -> Vec<(&'a str, &'a Tensor)> {
        store
            .ids()
            .filter_map(|id| self.param(id).map(|g| (store.get(id).name.as_str(), g)))
            .collect()
    }

    /// Add `scale * grad` into the store's gradient buffers, in store order.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = self.param(id) {
                let entry = store.get_mut(id);
                for (a, b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}
