//! Parameterised building blocks: convolutions, group norm, residual and
//! attention blocks. Layers only hold parameter names and hyper-parameters;
//! values live in a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::float::Float;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Largest divisor of `channels` that does not exceed `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

fn fan_in_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// `kernel^3` convolution with "same" padding.
    pub fn same(prefix: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(prefix, in_channels, out_channels, kernel, 1, kernel / 2)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.pow(3) + self.out_channels
    }

    /// Fan-in scaled uniform weights (or zeros), zero bias.
    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R, zero: bool) {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel, self.kernel];
        let w = if zero {
            Tensor::zeros(&shape)
        } else {
            fan_in_uniform(&shape, self.in_channels * self.kernel.pow(3), rng)
        };
        store.insert(self.weight.clone(), w);
        store.insert(self.bias.clone(), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.conv3d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(prefix: &str, channels: usize, max_groups: usize) -> Self {
        Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            channels,
            groups: group_count(channels, max_groups),
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>) {
        store.insert(self.gamma.clone(), Tensor::full(&[self.channels], T::one()));
        store.insert(self.beta.clone(), Tensor::zeros(&[self.channels]));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.group_norm(x, gamma, beta, self.groups, GROUP_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self { weight: format!("{prefix}.weight"), bias: format!("{prefix}.bias"), in_features, out_features }
    }

    pub fn param_count(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.insert(self.weight.clone(), fan_in_uniform(&[self.out_features, self.in_features], self.in_features, rng));
        store.insert(self.bias.clone(), Tensor::zeros(&[self.out_features]));
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.linear(x, w, b)
    }
}

/// Two `3^3` convolutions, each preceded by group norm + SiLU, with an
/// optional per-channel time-embedding injection between them and an
/// identity or `1^3` skip path.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv3d,
    pub time_proj: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv3d,
    pub skip: Option<Conv3d>,
}

impl ResBlock {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, time_dim: Option<usize>, max_groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&format!("{prefix}.norm1"), in_channels, max_groups),
            conv1: Conv3d::same(&format!("{prefix}.conv1"), in_channels, out_channels, 3),
            time_proj: time_dim.map(|d| Linear::new(&format!("{prefix}.time_proj"), d, out_channels)),
            norm2: GroupNorm::new(&format!("{prefix}.norm2"), out_channels, max_groups),
            conv2: Conv3d::same(&format!("{prefix}.conv2"), out_channels, out_channels, 3),
            skip: (in_channels != out_channels).then(|| Conv3d::same(&format!("{prefix}.skip"), in_channels, out_channels, 1)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.conv1.param_count()
            + self.time_proj.as_ref().map_or(0, Linear::param_count)
            + self.norm2.param_count()
            + self.conv2.param_count()
            + self.skip.as_ref().map_or(0, Conv3d::param_count)
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm1.init(store);
        self.conv1.init(store, rng, false);
        if let Some(tp) = &self.time_proj {
            tp.init(store, rng);
        }
        self.norm2.init(store);
        self.conv2.init(store, rng, false);
        if let Some(skip) = &self.skip {
            skip.init(store, rng, false);
        }
    }

    /// `temb` is the already-activated time embedding `[N, time_dim]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, temb: Option<NodeId>) -> Result<NodeId> {
        let h = self.norm1.forward(g, store, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, store, h)?;
        if let (Some(tp), Some(t)) = (&self.time_proj, temb) {
            let e = tp.forward(g, store, t)?;
            h = g.add_channel(h, e)?;
        }
        let h = self.norm2.forward(g, store, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let shortcut = match &self.skip {
            Some(skip) => skip.forward(g, store, x)?,
            None => x,
        };
        g.add(shortcut, h)
    }
}

/// Residual self-attention over all voxels of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub norm: GroupNorm,
    pub qkv: Conv3d,
    pub proj: Conv3d,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(prefix: &str, channels: usize, heads: usize, max_groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(&format!("{prefix}.norm"), channels, max_groups),
            qkv: Conv3d::same(&format!("{prefix}.qkv"), channels, 3 * channels, 1),
            proj: Conv3d::same(&format!("{prefix}.proj"), channels, channels, 1),
            heads,
        }
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count() + self.qkv.param_count() + self.proj.param_count()
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.norm.init(store);
        self.qkv.init(store, rng, false);
        self.proj.init(store, rng, false);
    }

    /// Returns `(output, attention node)`; the latter exposes the softmax weights.
    pub fn forward_traced<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.norm.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let att = g.attention(qkv, self.heads)?;
        let out = self.proj.forward(g, store, att)?;
        Ok((g.add(x, out)?, att))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(g, store, x)?.0)
    }
}

/// Stride-2 `3^3` convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    pub conv: Conv3d,
}

impl Downsample {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self { conv: Conv3d::new(&format!("{prefix}.conv"), channels, channels, 3, 2, 1) }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        self.conv.forward(g, store, x)
    }
}

/// Nearest-neighbour x2 followed by a `3^3` convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsample {
    pub conv: Conv3d,
}

impl Upsample {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self { conv: Conv3d::same(&format!("{prefix}.conv"), channels, channels, 3) }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let up = g.upsample2(x)?;
        self.conv.forward(g, store, up)
    }
}
