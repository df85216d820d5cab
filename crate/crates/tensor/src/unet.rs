//! Residual 3D U-Net with optional timestep conditioning.
//!
//! Level `i` runs at spatial extent `size / 2^i`. The encoder stores every
//! block output as a skip; the decoder consumes one skip per block, so each
//! decoder level has one more block than its encoder counterpart.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, NodeId};
use crate::nn::{AttentionBlock, Conv3d, Downsample, GroupNorm, Linear, ResBlock, Upsample};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    /// Encoder/decoder levels that get self-attention after each ResBlock.
    pub attention_levels: Vec<usize>,
    /// Self-attention between the two middle ResBlocks.
    pub middle_attention: bool,
    pub attention_heads: usize,
    pub max_groups: usize,
    /// Width of the sinusoidal timestep encoding and its projection; `None`
    /// builds an unconditioned network.
    pub time_embed_dim: Option<usize>,
    /// Zero-initialise the output convolution.
    pub zero_output: bool,
}

impl UNetSpec {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn check(&self) -> Result<()> {
        let bad = |reason: String| Err(TensorError::Geometry { op: "UNetSpec", reason });
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad(format!("multipliers {:?} must be non-empty and positive", self.channel_multipliers));
        }
        if self.num_res_blocks == 0 {
            return bad("at least one ResBlock per level".into());
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} outside 0..{}", self.levels()));
        }
        if self.attention_heads == 0 || self.max_groups == 0 {
            return bad("attention heads and group count must be positive".into());
        }
        let attn_channels = self
            .attention_levels
            .iter()
            .map(|&l| self.level_channels(l))
            .chain(self.middle_attention.then(|| self.level_channels(self.levels() - 1)));
        for c in attn_channels {
            if c % self.attention_heads != 0 {
                return bad(format!("{c} channels not divisible into {} heads", self.attention_heads));
            }
        }
        if let Some(d) = self.time_embed_dim {
            if d == 0 || d % 2 != 0 {
                return bad(format!("time embedding width {d} must be even and positive"));
            }
        }
        Ok(())
    }

    /// Spatial extents must halve cleanly at every downsampling.
    pub fn check_size(&self, spatial: &[usize]) -> Result<()> {
        let factor = 1usize << (self.levels() - 1);
        if spatial.iter().any(|&s| s == 0 || s % factor != 0) {
            return Err(TensorError::Geometry {
                op: "UNet",
                reason: format!("spatial size {spatial:?} not divisible by {factor}"),
            });
        }
        Ok(())
    }

    /// Closed-form parameter count, walking the same topology as [`UNet::new`].
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k * k + o;
        let gn = |c: usize| 2 * c;
        let lin = |i: usize, o: usize| o * i + o;
        let temb = self.time_embed_dim;
        let res = |i: usize, o: usize| {
            gn(i) + conv(i, o, 3) + temb.map_or(0, |d| lin(d, o)) + gn(o) + conv(o, o, 3)
                + if i != o { conv(i, o, 1) } else { 0 }
        };
        let att = |c: usize| gn(c) + conv(c, 3 * c, 1) + conv(c, c, 1);

        let mut total = conv(self.in_channels, self.base_channels, 3);
        if let Some(d) = temb {
            total += 2 * lin(d, d);
        }
        let mut skips = vec![self.base_channels];
        let mut ch = self.base_channels;
        for level in 0..self.levels() {
            let out = self.level_channels(level);
            let attn = self.attention_levels.contains(&level);
            for _ in 0..self.num_res_blocks {
                total += res(ch, out) + if attn { att(out) } else { 0 };
                ch = out;
                skips.push(ch);
            }
            if level + 1 < self.levels() {
                total += conv(ch, ch, 3);
                skips.push(ch);
            }
        }
        total += 2 * res(ch, ch) + if self.middle_attention { att(ch) } else { 0 };
        for level in (0..self.levels()).rev() {
            let out = self.level_channels(level);
            let attn = self.attention_levels.contains(&level);
            for _ in 0..=self.num_res_blocks {
                let skip = skips.pop().expect("one skip per decoder block");
                total += res(ch + skip, out) + if attn { att(out) } else { 0 };
                ch = out;
            }
            if level > 0 {
                total += conv(ch, ch, 3);
            }
        }
        total + gn(ch) + conv(ch, self.out_channels, 3)
    }
}

/// Sinusoidal encoding `[sin(t w_0) .. sin(t w_{h-1}), cos(t w_0) .. cos(t w_{h-1})]`
/// with `w_i = 10000^(-i/h)` and `h = dim / 2`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TensorError::Geometry { op: "sinusoidal_embedding", reason: format!("dimension {dim} must be even") });
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    Ok(freqs.iter().map(|w| (t * w).sin()).chain(freqs.iter().map(|w| (t * w).cos())).collect())
}

enum Block {
    Res(ResBlock),
    Attn(AttentionBlock),
    Down(Downsample),
    Up(Upsample),
}

impl Block {
    fn init<T: Float, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        match self {
            Block::Res(b) => b.init(store, rng),
            Block::Attn(b) => b.init(store, rng),
            Block::Down(b) => b.conv.init(store, rng, false),
            Block::Up(b) => b.conv.init(store, rng, false),
        }
    }
}

/// Named block outputs collected during a forward pass.
pub struct Trace {
    pub blocks: Vec<(String, NodeId)>,
    /// Attention nodes in forward order, exposing the softmax weights.
    pub attention: Vec<NodeId>,
}

pub struct UNet {
    spec: UNetSpec,
    conv_in: Conv3d,
    time_fc: Option<(Linear, Linear)>,
    encoder: Vec<(String, Block, bool)>,
    middle: Vec<(String, Block)>,
    decoder: Vec<(String, Block, bool)>,
    out_norm: GroupNorm,
    out_conv: Conv3d,
}

impl UNet {
    pub fn new(spec: UNetSpec) -> Result<Self> {
        spec.check()?;
        let g = spec.max_groups;
        let temb = spec.time_embed_dim;
        let heads = spec.attention_heads;
        let conv_in = Conv3d::same("conv_in", spec.in_channels, spec.base_channels, 3);
        let time_fc = temb.map(|d| (Linear::new("time.fc1", d, d), Linear::new("time.fc2", d, d)));

        // The flag marks blocks whose output is pushed as / popped from a skip.
        let mut encoder = Vec::new();
        let mut skips = vec![spec.base_channels];
        let mut ch = spec.base_channels;
        for level in 0..spec.levels() {
            let out = spec.level_channels(level);
            for j in 0..spec.num_res_blocks {
                let name = format!("down.{level}.res.{j}");
                let attn = spec.attention_levels.contains(&level);
                encoder.push((name.clone(), Block::Res(ResBlock::new(&name, ch, out, temb, g)), !attn));
                if attn {
                    let name = format!("down.{level}.attn.{j}");
                    encoder.push((name.clone(), Block::Attn(AttentionBlock::new(&name, out, heads, g)), true));
                }
                ch = out;
                skips.push(ch);
            }
            if level + 1 < spec.levels() {
                let name = format!("down.{level}.downsample");
                encoder.push((name.clone(), Block::Down(Downsample::new(&name, ch)), true));
                skips.push(ch);
            }
        }

        let mut middle = vec![("mid.res1".to_string(), Block::Res(ResBlock::new("mid.res1", ch, ch, temb, g)))];
        if spec.middle_attention {
            middle.push(("mid.attn".to_string(), Block::Attn(AttentionBlock::new("mid.attn", ch, heads, g))));
        }
        middle.push(("mid.res2".to_string(), Block::Res(ResBlock::new("mid.res2", ch, ch, temb, g))));

        let mut decoder = Vec::new();
        for level in (0..spec.levels()).rev() {
            let out = spec.level_channels(level);
            for j in 0..=spec.num_res_blocks {
                let skip = skips.pop().expect("one skip per decoder block");
                let name = format!("up.{level}.res.{j}");
                decoder.push((name.clone(), Block::Res(ResBlock::new(&name, ch + skip, out, temb, g)), true));
                if spec.attention_levels.contains(&level) {
                    let name = format!("up.{level}.attn.{j}");
                    decoder.push((name.clone(), Block::Attn(AttentionBlock::new(&name, out, heads, g)), false));
                }
                ch = out;
            }
            if level > 0 {
                let name = format!("up.{level}.upsample");
                decoder.push((name.clone(), Block::Up(Upsample::new(&name, ch)), false));
            }
        }
        let out_norm = GroupNorm::new("out.norm", ch, g);
        let out_conv = Conv3d::same("out.conv", ch, spec.out_channels, 3);
        Ok(Self { spec, conv_in, time_fc, encoder, middle, decoder, out_norm, out_conv })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// Fresh parameters, drawn in a fixed layer order from `rng`.
    pub fn init<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.conv_in.init(&mut store, rng, false);
        if let Some((fc1, fc2)) = &self.time_fc {
            fc1.init(&mut store, rng);
            fc2.init(&mut store, rng);
        }
        for (_, b, _) in &self.encoder {
            b.init(&mut store, rng);
        }
        for (_, b) in &self.middle {
            b.init(&mut store, rng);
        }
        for (_, b, _) in &self.decoder {
            b.init(&mut store, rng);
        }
        self.out_norm.init(&mut store);
        self.out_conv.init(&mut store, rng, self.spec.zero_output);
        store
    }

    fn run<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &Block,
        x: NodeId,
        temb: Option<NodeId>,
        trace: &mut Trace,
    ) -> Result<NodeId> {
        match block {
            Block::Res(b) => b.forward(g, store, x, temb),
            Block::Attn(b) => {
                let (out, att) = b.forward_traced(g, store, x)?;
                trace.attention.push(att);
                Ok(out)
            }
            Block::Down(b) => b.forward(g, store, x),
            Block::Up(b) => b.forward(g, store, x),
        }
    }

    /// Forward pass on `x` of shape `[N, in_channels, D, H, W]`. `timesteps`
    /// holds one value per batch item and is ignored without time embedding.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        timesteps: &[f64],
    ) -> Result<(NodeId, Trace)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 5 || shape[1] != self.spec.in_channels {
            return Err(TensorError::Geometry {
                op: "UNet",
                reason: format!("input shape {shape:?} needs [N, {}, D, H, W]", self.spec.in_channels),
            });
        }
        self.spec.check_size(&shape[2..])?;
        let mut trace = Trace { blocks: Vec::new(), attention: Vec::new() };

        let temb = match (&self.time_fc, self.spec.time_embed_dim) {
            (Some((fc1, fc2)), Some(dim)) => {
                if timesteps.len() != shape[0] {
                    return Err(TensorError::Geometry {
                        op: "UNet",
                        reason: format!("{} timesteps for batch of {}", timesteps.len(), shape[0]),
                    });
                }
                let mut raw = Vec::with_capacity(shape[0] * dim);
                for &t in timesteps {
                    raw.extend(sinusoidal_embedding(t, dim)?.into_iter().map(T::from_f64_lossy));
                }
                let e = g.input(Tensor::from_vec(&[shape[0], dim], raw)?);
                let e = fc1.forward(g, store, e)?;
                let e = g.silu(e);
                let e = fc2.forward(g, store, e)?;
                let e = g.silu(e);
                trace.blocks.push(("time".into(), e));
                Some(e)
            }
            _ => None,
        };

        let mut h = self.conv_in.forward(g, store, x)?;
        trace.blocks.push(("conv_in".into(), h));
        let mut skips = vec![h];
        for (name, block, is_skip) in &self.encoder {
            h = self.run(g, store, block, h, temb, &mut trace)?;
            trace.blocks.push((name.clone(), h));
            if *is_skip {
                skips.push(h);
            }
        }
        for (name, block) in &self.middle {
            h = self.run(g, store, block, h, temb, &mut trace)?;
            trace.blocks.push((name.clone(), h));
        }
        for (name, block, takes_skip) in &self.decoder {
            if *takes_skip {
                let s = skips.pop().expect("encoder pushed one skip per decoder block");
                h = g.concat(h, s)?;
            }
            h = self.run(g, store, block, h, temb, &mut trace)?;
            trace.blocks.push((name.clone(), h));
        }
        let h = self.out_norm.forward(g, store, h)?;
        let h = g.silu(h);
        let out = self.out_conv.forward(g, store, h)?;
        trace.blocks.push(("out".into(), out));
        Ok((out, trace))
    }
}
