//! The noise predictor: a timestep-conditioned residual 3D U-Net taking the
//! image channels concatenated with the one-hot mask channels.

use serde::{Deserialize, Serialize};
use voxdiff_tensor::{Float, Graph, ParamStore, Tensor, UNet, UNetSpec};

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::{Dims, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub mask_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    /// Levels (0 = full resolution) with self-attention after each ResBlock.
    pub attention_levels: Vec<usize>,
    pub middle_attention: bool,
    pub attention_heads: usize,
    pub groupnorm_groups: usize,
    pub time_embed_dim: usize,
    pub size: Dims,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// 16^3, two levels, attention at the coarser one.
    pub fn desk() -> Self {
        Self {
            image_channels: 1,
            mask_channels: 2,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_levels: vec![1],
            middle_attention: true,
            attention_heads: 1,
            groupnorm_groups: 8,
            time_embed_dim: 32,
            size: Dims::cube(16),
        }
    }

    /// Full-scale 128^3 configuration: 64 base channels and six levels
    /// (128, 64, 32, 16, 8, 4) with attention at the 16^3 level. The level
    /// count, multipliers and block count are assumptions.
    pub fn paper() -> Self {
        Self {
            image_channels: 1,
            mask_channels: 2,
            base_channels: 64,
            channel_multipliers: vec![1, 1, 2, 2, 4, 4],
            num_res_blocks: 2,
            attention_levels: vec![3],
            middle_attention: true,
            attention_heads: 1,
            groupnorm_groups: 8,
            time_embed_dim: 256,
            size: Dims::cube(128),
        }
    }

    /// 8^3, base 4, one attention block; small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            image_channels: 1,
            mask_channels: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            attention_levels: vec![],
            middle_attention: true,
            attention_heads: 1,
            groupnorm_groups: 8,
            time_embed_dim: 16,
            size: Dims::cube(8),
        }
    }

    /// Desk network for four image modalities and four mask classes.
    pub fn multimodal() -> Self {
        Self { image_channels: 4, mask_channels: 4, ..Self::desk() }
    }

    pub fn input_channels(&self) -> usize {
        self.image_channels + self.mask_channels
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.input_channels(),
            out_channels: self.image_channels,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            num_res_blocks: self.num_res_blocks,
            attention_levels: self.attention_levels.clone(),
            middle_attention: self.middle_attention,
            attention_heads: self.attention_heads,
            max_groups: self.groupnorm_groups,
            time_embed_dim: Some(self.time_embed_dim),
            zero_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.mask_channels == 0 {
            return Err(Error::Config("image and mask channel counts must be positive".into()));
        }
        let spec = self.unet_spec();
        spec.check().map_err(|e| Error::Config(e.to_string()))?;
        spec.check_size(&[self.size.depth, self.size.height, self.size.width])
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Number of scalar parameters the built network will hold.
    pub fn parameter_count(&self) -> usize {
        self.unet_spec().parameter_count()
    }
}

/// Raw sinusoidal encoding of `t`; the learned projection is part of the network.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    Ok(voxdiff_tensor::sinusoidal_embedding(t as f64, dim)?)
}

/// Stack equally-shaped volumes into an `[N, C, D, H, W]` tensor.
pub fn stack<T: Float>(vols: &[Volume]) -> Result<Tensor<T>> {
    let first = vols.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut data = Vec::with_capacity(vols.len() * first.len());
    for v in vols {
        if !v.same_shape(first) {
            return Err(Error::Shape { op: "stack", left: first.shape_string(), right: v.shape_string() });
        }
        data.extend(v.voxels().iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    let d = first.dims();
    Ok(Tensor::from_vec(&[vols.len(), first.channels(), d.depth, d.height, d.width], data)?)
}

/// Inverse of [`stack`].
pub fn unstack<T: Float>(t: &Tensor<T>) -> Result<Vec<Volume>> {
    let s = t.shape();
    let (channels, dims) = (s[1], Dims::new(s[4], s[3], s[2]));
    t.data()
        .chunks(t.item_len())
        .map(|chunk| Volume::new(channels, dims, chunk.iter().map(|v| v.to_f64_lossy() as f32).collect()))
        .collect()
}

pub struct Denoiser {
    config: DenoiserConfig,
    net: UNet,
    params: ParamStore<f32>,
}

impl Denoiser {
    /// Fresh network with parameters drawn from `rng`.
    pub fn build(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.unet_spec())?;
        let params = net.init(rng.as_rand());
        Ok(Self { config, net, params })
    }

    /// Network with externally supplied parameters (e.g. from a checkpoint).
    pub fn from_params(config: DenoiserConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.unet_spec())?;
        let reference: ParamStore<f32> = net.init(Rng::new(0).as_rand());
        if !reference.same_layout(&params) {
            return Err(Error::Invalid("parameter names or shapes do not match the configuration".into()));
        }
        Ok(Self { config, net, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    fn check_inputs(&self, inputs: &[Volume], ts: &[usize]) -> Result<()> {
        if inputs.is_empty() || inputs.len() != ts.len() {
            return Err(Error::Invalid(format!("{} inputs with {} timesteps", inputs.len(), ts.len())));
        }
        for x in inputs {
            if x.channels() != self.config.input_channels() || x.dims() != self.config.size {
                return Err(Error::Shape {
                    op: "predict_noise",
                    left: x.shape_string(),
                    right: format!("({}, {})", self.config.input_channels(), self.config.size),
                });
            }
        }
        Ok(())
    }

    /// Mean loss over the batch and the gradient of every parameter under an
    /// arbitrary parameter precision. `inputs` are mask-concatenated noisy
    /// volumes and `targets` the noise that produced them.
    pub fn loss_and_gradients_with<T: Float>(
        &self,
        params: &ParamStore<T>,
        inputs: &[Volume],
        ts: &[usize],
        targets: &[Volume],
        kind: LossKind,
    ) -> Result<(f64, ParamStore<T>)> {
        self.check_inputs(inputs, ts)?;
        if targets.len() != inputs.len() {
            return Err(Error::Invalid(format!("{} targets for {} inputs", targets.len(), inputs.len())));
        }
        let target = stack::<T>(targets)?;
        let mut g = Graph::new();
        let x = g.input(stack::<T>(inputs)?);
        let times: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let (out, trace) = self.net.forward(&mut g, params, x, &times)?;
        check_trace(&g, &trace.blocks)?;
        if g.value(out).shape() != target.shape() {
            return Err(Error::Shape {
                op: "loss",
                left: format!("{:?}", g.value(out).shape()),
                right: format!("{:?}", target.shape()),
            });
        }
        let loss = match kind {
            LossKind::L1 => g.l1_loss(out, &target)?,
            LossKind::L2 => g.l2_loss(out, &target)?,
        };
        let value = g.value(loss).data()[0].to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at timesteps {ts:?}")));
        }
        let grads = g.backward(loss)?;
        let grads = g.param_grads(&grads, params);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok((value, grads))
    }

    pub fn loss_and_gradients(
        &self,
        inputs: &[Volume],
        ts: &[usize],
        targets: &[Volume],
        kind: LossKind,
    ) -> Result<(f64, ParamStore<f32>)> {
        self.loss_and_gradients_with(&self.params, inputs, ts, targets, kind)
    }

    /// Single-example gradient of the noise-prediction loss.
    pub fn gradients(&self, x_tilde: &Volume, t: usize, kind: LossKind, target_eps: &Volume) -> Result<ParamStore<f32>> {
        Ok(self.loss_and_gradients(std::slice::from_ref(x_tilde), &[t], std::slice::from_ref(target_eps), kind)?.1)
    }

    /// Loss only, under arbitrary parameter precision.
    pub fn loss_with<T: Float>(
        &self,
        params: &ParamStore<T>,
        inputs: &[Volume],
        ts: &[usize],
        targets: &[Volume],
        kind: LossKind,
    ) -> Result<f64> {
        let pred = self.predict_with(params, inputs, ts)?;
        let target = stack::<T>(targets)?;
        let n = target.len() as f64;
        let sum: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let d = (p - y).to_f64_lossy();
                match kind {
                    LossKind::L1 => d.abs(),
                    LossKind::L2 => d * d,
                }
            })
            .sum();
        Ok(sum / n)
    }

    /// Stacked predictions for `inputs` under arbitrary parameter precision.
    pub fn predict_with<T: Float>(&self, params: &ParamStore<T>, inputs: &[Volume], ts: &[usize]) -> Result<Tensor<T>> {
        self.check_inputs(inputs, ts)?;
        let mut g = Graph::new();
        let x = g.input(stack::<T>(inputs)?);
        let times: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let (out, trace) = self.net.forward(&mut g, params, x, &times)?;
        check_trace(&g, &trace.blocks)?;
        Ok(g.value(out).clone())
    }
}

/// Names the first block whose output is not finite.
fn check_trace<T: Float>(g: &Graph<T>, blocks: &[(String, voxdiff_tensor::NodeId)]) -> Result<()> {
    match blocks.iter().find(|(_, id)| !g.value(*id).all_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("output of layer {name}"))),
        None => Ok(()),
    }
}

impl NoisePredictor for Denoiser {
    fn image_channels(&self) -> usize {
        self.config.image_channels
    }

    fn mask_channels(&self) -> usize {
        self.config.mask_channels
    }

    fn dims(&self) -> Dims {
        self.config.size
    }

    fn predict_noise(&self, x_tilde: &Volume, t: usize) -> Result<Volume> {
        Ok(self.predict_noise_batch(std::slice::from_ref(x_tilde), &[t])?.remove(0))
    }

    fn predict_noise_batch(&self, inputs: &[Volume], ts: &[usize]) -> Result<Vec<Volume>> {
        unstack(&self.predict_with(&self.params, inputs, ts)?)
    }
}
