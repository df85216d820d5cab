//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! data its backward rule needs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients.

use indexmap::IndexMap;

use crate::conv::{conv3d_backward, conv3d_fast};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::kernels::{self, GroupStats};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param,
    Conv3d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, stats: GroupStats<T> },
    Silu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddChannel { x: NodeId, e: NodeId },
    Concat { a: NodeId, b: NodeId },
    Upsample2 { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Attention { qkv: NodeId, heads: usize, probs: Vec<T> },
    Scale { x: NodeId, factor: T },
    L1 { pred: NodeId, target: Tensor<T> },
    L2 { pred: NodeId, target: Tensor<T> },
    Bce { prob: NodeId, target: Tensor<T>, clamp: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, NodeId>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: IndexMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Softmax weights recorded by an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param, true)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let value = conv3d_fast(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv3d { x, w, b, stride, padding }, rg))
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let (value, stats) = kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, stats }, rg))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(kernels::silu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds `e[n, c]` to every voxel of channel `c` in batch item `n`.
    pub fn add_channel(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let (xv, ev) = (self.value(x), self.value(e));
        if ev.shape() != [xv.batch(), xv.channels()] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel",
                left: xv.shape().to_vec(),
                right: ev.shape().to_vec(),
            });
        }
        let s = xv.spatial_len();
        let mut value = xv.clone();
        for (chunk, &bias) in value.data_mut().chunks_mut(s).zip(ev.data()) {
            for v in chunk {
                *v += bias;
            }
        }
        let rg = self.rg(&[x, e]);
        Ok(self.push(value, Op::AddChannel { x, e }, rg))
    }

    /// Channel-wise concatenation, `a` first.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.batch() != bv.batch() || av.spatial() != bv.spatial() {
            return Err(TensorError::ShapeMismatch { op: "concat", left: av.shape().to_vec(), right: bv.shape().to_vec() });
        }
        let (ai, bi) = (av.item_len(), bv.item_len());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..av.batch() {
            data.extend_from_slice(&av.data()[n * ai..(n + 1) * ai]);
            data.extend_from_slice(&bv.data()[n * bi..(n + 1) * bi]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] += bv.channels();
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = kernels::upsample2_forward(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2 { x }, rg))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn attention(&mut self, qkv: NodeId, heads: usize) -> Result<NodeId> {
        let (value, probs) = kernels::attention_forward(self.value(qkv), heads)?;
        let rg = self.rg(&[qkv]);
        Ok(self.push(value, Op::Attention { qkv, heads, probs }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Mean absolute error against a constant target. The subgradient at a
    /// zero residual is 0.
    pub fn l1_loss(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        same_shape("l1_loss", self.value(pred), target)?;
        let n = target.len() as f64;
        let sum: f64 = self.value(pred).data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs().to_f64_lossy()).sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(sum / n)), Op::L1 { pred, target: target.clone() }, rg))
    }

    /// Mean squared error against a constant target.
    pub fn l2_loss(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        same_shape("l2_loss", self.value(pred), target)?;
        let n = target.len() as f64;
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).to_f64_lossy();
                d * d
            })
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(sum / n)), Op::L2 { pred, target: target.clone() }, rg))
    }

    /// Binary cross-entropy of probabilities clamped to `[clamp, 1 - clamp]`.
    pub fn bce_loss(&mut self, prob: NodeId, target: &Tensor<T>, clamp: T) -> Result<NodeId> {
        same_shape("bce_loss", self.value(prob), target)?;
        let n = target.len() as f64;
        let hi = T::one() - clamp;
        let sum: f64 = self
            .value(prob)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.max(clamp).min(hi);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln()).to_f64_lossy()
            })
            .sum();
        let rg = self.rg(&[prob]);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(sum / n)), Op::Bce { prob, target: target.clone(), clamp }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Geometry { op: "backward", reason: "loss must be a scalar".into() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor<T>| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv3d { x, w, b, stride, padding } => {
                let cg = conv3d_backward(self.value(*x), self.value(*w), g, *stride, *padding, self.wants(*x))?;
                if let Some(gx) = cg.input {
                    acc(*x, gx)?;
                }
                if self.wants(*w) {
                    acc(*w, cg.weight)?;
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(*b, cg.bias)?;
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (gx, ggamma, gbeta) = kernels::group_norm_backward(self.value(*x), self.value(*gamma), stats, *groups, g);
                if self.wants(*x) {
                    acc(*x, gx)?;
                }
                if self.wants(*gamma) {
                    acc(*gamma, ggamma)?;
                }
                if self.wants(*beta) {
                    acc(*beta, gbeta)?;
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= kernels::silu_grad(v);
                }
                acc(*x, gx)?;
            }
            Op::Sigmoid { x } => {
                let mut gx = g.clone();
                for (d, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= s * (T::one() - s);
                }
                acc(*x, gx)?;
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.clone())?;
                }
                if self.wants(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::AddChannel { x, e } => {
                if self.wants(*x) {
                    acc(*x, g.clone())?;
                }
                if self.wants(*e) {
                    let s = g.spatial_len();
                    let ev = self.value(*e);
                    let data = g.data().chunks(s).map(|c| c.iter().copied().sum()).collect();
                    acc(*e, Tensor::from_vec(ev.shape(), data)?)?;
                }
            }
            Op::Concat { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ai, bi) = (av.item_len(), bv.item_len());
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for chunk in g.data().chunks(ai + bi) {
                    ga.extend_from_slice(&chunk[..ai]);
                    gb.extend_from_slice(&chunk[ai..]);
                }
                if self.wants(*a) {
                    acc(*a, Tensor::from_vec(av.shape(), ga)?)?;
                }
                if self.wants(*b) {
                    acc(*b, Tensor::from_vec(bv.shape(), gb)?)?;
                }
            }
            Op::Upsample2 { x } => {
                acc(*x, kernels::upsample2_backward(self.value(*x).shape(), g))?;
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                if self.wants(*x) {
                    acc(*x, gx)?;
                }
                if self.wants(*w) {
                    acc(*w, gw)?;
                }
                if self.wants(*b) {
                    acc(*b, gb)?;
                }
            }
            Op::Attention { qkv, heads, probs } => {
                acc(*qkv, kernels::attention_backward(self.value(*qkv), probs, *heads, g))?;
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                acc(*x, g.map(|v| v * f))?;
            }
            Op::L1 { pred, target } => {
                let upstream = g.data()[0] / T::from_usize(target.len()).unwrap();
                let pv = self.value(*pred);
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let d = p - t;
                        if d > T::zero() {
                            upstream
                        } else if d < T::zero() {
                            -upstream
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*pred, Tensor::from_vec(pv.shape(), data)?)?;
            }
            Op::L2 { pred, target } => {
                let upstream = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(target.len()).unwrap();
                let pv = self.value(*pred);
                let data = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * upstream).collect();
                acc(*pred, Tensor::from_vec(pv.shape(), data)?)?;
            }
            Op::Bce { prob, target, clamp } => {
                let upstream = g.data()[0] / T::from_usize(target.len()).unwrap();
                let pv = self.value(*prob);
                let hi = T::one() - *clamp;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        if p < *clamp || p > hi {
                            T::zero()
                        } else {
                            upstream * (-(y / p) + (T::one() - y) / (T::one() - p))
                        }
                    })
                    .collect();
                acc(*prob, Tensor::from_vec(pv.shape(), data)?)?;
            }
        }
        Ok(())
    }

    /// Gradients of every bound parameter, keyed by parameter name. Parameters
    /// of `store` that never entered the graph receive zeros.
    pub fn param_grads(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, value) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|id| grads.wrt(*id).cloned())
                .unwrap_or_else(|| Tensor::zeros(value.shape()));
            out.insert(name, g);
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}
