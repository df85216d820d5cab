//! Volumetric data types and the conditioning-input operations.
//!
//! Voxels are stored channel-major with `x` fastest:
//! `index = ((c * depth + z) * height + y) * width + x`.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

/// Spatial extent of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Self { width, height, depth }
    }

    pub const fn cube(side: usize) -> Self {
        Self::new(side, side, side)
    }

    pub const fn voxels(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn is_positive(&self) -> bool {
        self.width > 0 && self.height > 0 && self.depth > 0
    }

    /// Linear offset of `(x, y, z)` within one channel.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.width;
        let y = (index / self.width) % self.height;
        let z = index / (self.width * self.height);
        (x, y, z)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// Multi-channel scalar volume with 32-bit float voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume {
    /// Validates length and finiteness.
    pub fn new(channels: usize, dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        if channels == 0 || !dims.is_positive() {
            return Err(Error::Invalid(format!("volume shape ({channels}, {dims}) must be positive")));
        }
        if voxels.len() != channels * dims.voxels() {
            return Err(Error::Shape {
                op: "Volume::new",
                left: format!("{} voxels", voxels.len()),
                right: format!("({channels}, {dims})"),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} of a ({channels}, {dims}) volume")));
        }
        Ok(Self { channels, dims, voxels })
    }

    pub fn filled(channels: usize, dims: Dims, value: f32) -> Self {
        assert!(value.is_finite());
        Self { channels, dims, voxels: vec![value; channels * dims.voxels()] }
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self::filled(channels, dims, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[c * self.dims.voxels() + self.dims.index(x, y, z)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.voxels();
        &self.voxels[c * n..(c + 1) * n]
    }

    /// Copy of channels `range`.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Volume> {
        if range.start >= range.end || range.end > self.channels {
            return Err(Error::Invalid(format!("channel range {range:?} outside 0..{}", self.channels)));
        }
        let n = self.dims.voxels();
        Ok(Self {
            channels: range.len(),
            dims: self.dims,
            voxels: self.voxels[range.start * n..range.end * n].to_vec(),
        })
    }

    /// Elementwise map; fails if the result is not finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Volume> {
        Volume::new(self.channels, self.dims, self.voxels.iter().map(|&v| f(v)).collect())
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn shape_string(&self) -> String {
        format!("({}, {})", self.channels, self.dims)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Integer class labels over a spatial grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if !dims.is_positive() {
            return Err(Error::Invalid(format!("label grid {dims} must be positive")));
        }
        if labels.len() != dims.voxels() {
            return Err(Error::Shape {
                op: "LabelVolume::new",
                left: format!("{} labels", labels.len()),
                right: dims.to_string(),
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, labels: vec![0; dims.voxels()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Voxel counts per label value `0..=max_label`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.max_label() as usize + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// 1.0 where the label equals `class`, else 0.0.
    pub fn binary(&self, class: u8) -> Volume {
        Volume {
            channels: 1,
            dims: self.dims,
            voxels: self.labels.iter().map(|&l| if l == class { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// One-hot encode class labels, optionally dropping the background class 0.
pub fn one_hot_encode(labels: &LabelVolume, num_classes: usize, exclude_background: bool) -> Result<Volume> {
    if num_classes < 2 {
        return Err(Error::Invalid(format!("one-hot encoding needs at least 2 classes, got {num_classes}")));
    }
    let n = labels.dims.voxels();
    let channels = if exclude_background { num_classes - 1 } else { num_classes };
    let mut voxels = vec![0.0f32; channels * n];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l as usize >= num_classes {
            return Err(Error::LabelOutOfRange { index: i, label: l, classes: num_classes });
        }
        let ch = if exclude_background {
            if l == 0 {
                continue;
            }
            l as usize - 1
        } else {
            l as usize
        };
        voxels[ch * n + i] = 1.0;
    }
    Ok(Volume { channels, dims: labels.dims, voxels })
}

/// Inverse of [`one_hot_encode`] with the background excluded: label is the hot
/// channel index plus one, or 0 where no channel is hot.
pub fn decode_one_hot(mask: &Volume) -> Result<LabelVolume> {
    let n = mask.dims.voxels();
    if mask.channels > u8::MAX as usize {
        return Err(Error::Invalid(format!("{} channels exceed the label range", mask.channels)));
    }
    let mut labels = vec![0u8; n];
    for (i, label) in labels.iter_mut().enumerate() {
        for c in 0..mask.channels {
            let v = mask.voxels[c * n + i];
            if v == 1.0 {
                if *label != 0 {
                    return Err(Error::NotOneHot { index: i });
                }
                *label = c as u8 + 1;
            } else if v != 0.0 {
                return Err(Error::NotOneHot { index: i });
            }
        }
    }
    Ok(LabelVolume { dims: mask.dims, labels })
}

/// Channel-wise concatenation, `a`'s channels first.
pub fn concat_channels(a: &Volume, b: &Volume) -> Result<Volume> {
    if a.dims != b.dims {
        return Err(Error::Shape { op: "concat_channels", left: a.shape_string(), right: b.shape_string() });
    }
    let mut voxels = Vec::with_capacity(a.len() + b.len());
    voxels.extend_from_slice(&a.voxels);
    voxels.extend_from_slice(&b.voxels);
    Ok(Volume { channels: a.channels + b.channels, dims: a.dims, voxels })
}

/// Affine map of `[src_lo, src_hi]` onto `[-1, 1]`, clamping values outside the source range.
pub fn rescale_intensity(v: &Volume, src_lo: f32, src_hi: f32) -> Result<Volume> {
    if !(src_lo < src_hi) || !src_lo.is_finite() || !src_hi.is_finite() {
        return Err(Error::Invalid(format!("degenerate intensity range [{src_lo}, {src_hi}]")));
    }
    let (lo, hi) = (src_lo as f64, src_hi as f64);
    let voxels = v
        .voxels
        .iter()
        .map(|&x| {
            let t = (2.0 * (x as f64 - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
            t as f32
        })
        .collect();
    Ok(Volume { channels: v.channels, dims: v.dims, voxels })
}

/// Source coordinate for target coordinate `t` under centred crop/pad, if inside.
fn centred_source(t: usize, src: usize, dst: usize) -> Option<usize> {
    if dst >= src {
        let off = (dst - src) / 2;
        t.checked_sub(off).filter(|&s| s < src)
    } else {
        Some(t + (src - dst) / 2)
    }
}

fn crop_or_pad_grid<T: Copy>(src: &[T], channels: usize, from: Dims, to: Dims, fill: T) -> Vec<T> {
    let mut out = vec![fill; channels * to.voxels()];
    let xs: Vec<Option<usize>> = (0..to.width).map(|t| centred_source(t, from.width, to.width)).collect();
    for c in 0..channels {
        for z in 0..to.depth {
            let Some(sz) = centred_source(z, from.depth, to.depth) else { continue };
            for y in 0..to.height {
                let Some(sy) = centred_source(y, from.height, to.height) else { continue };
                let src_row = c * from.voxels() + from.index(0, sy, sz);
                let dst_row = c * to.voxels() + to.index(0, y, z);
                for (x, sx) in xs.iter().enumerate() {
                    if let Some(sx) = sx {
                        out[dst_row + x] = src[src_row + sx];
                    }
                }
            }
        }
    }
    out
}

/// Centred crop/pad per axis to `target`; padding uses `pad_value`.
pub fn crop_or_pad(v: &Volume, target: Dims, pad_value: f32) -> Result<Volume> {
    if !target.is_positive() || !pad_value.is_finite() {
        return Err(Error::Invalid(format!("crop/pad target {target} with pad {pad_value}")));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let voxels = crop_or_pad_grid(&v.voxels, v.channels, v.dims, target, pad_value);
    Ok(Volume { channels: v.channels, dims: target, voxels })
}

/// Label counterpart of [`crop_or_pad`]; padding uses background 0.
pub fn crop_or_pad_labels(l: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    if !target.is_positive() {
        return Err(Error::Invalid(format!("crop/pad target {target}")));
    }
    Ok(LabelVolume { dims: target, labels: crop_or_pad_grid(&l.labels, 1, l.dims, target, 0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Half-voxel-centred source coordinate for target index `t`.
fn source_coord(t: usize, src: usize, dst: usize) -> f64 {
    ((t as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn nearest_index(t: usize, src: usize, dst: usize) -> usize {
    (((t as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}

/// Resample to `target` with half-voxel-centred sampling.
pub fn resize(v: &Volume, target: Dims, mode: Interpolation) -> Result<Volume> {
    if !target.is_positive() {
        return Err(Error::Invalid(format!("resize target {target} must be positive")));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let from = v.dims;
    let n_src = from.voxels();
    let mut out = Vec::with_capacity(v.channels * target.voxels());
    match mode {
        Interpolation::Nearest => {
            for c in 0..v.channels {
                let src = &v.voxels[c * n_src..(c + 1) * n_src];
                for z in 0..target.depth {
                    let sz = nearest_index(z, from.depth, target.depth);
                    for y in 0..target.height {
                        let sy = nearest_index(y, from.height, target.height);
                        for x in 0..target.width {
                            let sx = nearest_index(x, from.width, target.width);
                            out.push(src[from.index(sx, sy, sz)]);
                        }
                    }
                }
            }
        }
        Interpolation::Trilinear => {
            let taps = |t: usize, s: usize, d: usize| {
                let c = source_coord(t, s, d);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(s - 1);
                (lo, hi, c - lo as f64)
            };
            for c in 0..v.channels {
                let src = &v.voxels[c * n_src..(c + 1) * n_src];
                for z in 0..target.depth {
                    let (z0, z1, fz) = taps(z, from.depth, target.depth);
                    for y in 0..target.height {
                        let (y0, y1, fy) = taps(y, from.height, target.height);
                        for x in 0..target.width {
                            let (x0, x1, fx) = taps(x, from.width, target.width);
                            let corners = [
                                (src[from.index(x0, y0, z0)], (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
                                (src[from.index(x1, y0, z0)], fx * (1.0 - fy) * (1.0 - fz)),
                                (src[from.index(x0, y1, z0)], (1.0 - fx) * fy * (1.0 - fz)),
                                (src[from.index(x1, y1, z0)], fx * fy * (1.0 - fz)),
                                (src[from.index(x0, y0, z1)], (1.0 - fx) * (1.0 - fy) * fz),
                                (src[from.index(x1, y0, z1)], fx * (1.0 - fy) * fz),
                                (src[from.index(x0, y1, z1)], (1.0 - fx) * fy * fz),
                                (src[from.index(x1, y1, z1)], fx * fy * fz),
                            ];
                            let (mut lo, mut hi, mut acc) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
                            for (val, w) in corners {
                                acc += val as f64 * w;
                                lo = lo.min(val);
                                hi = hi.max(val);
                            }
                            // convex combination: keep rounding inside the neighbourhood range
                            out.push((acc as f32).clamp(lo, hi));
                        }
                    }
                }
            }
        }
    }
    Ok(Volume { channels: v.channels, dims: target, voxels: out })
}

/// Nearest-neighbour resampling of labels.
pub fn resize_labels(l: &LabelVolume, target: Dims) -> Result<LabelVolume> {
    if !target.is_positive() {
        return Err(Error::Invalid(format!("resize target {target} must be positive")));
    }
    if target == l.dims {
        return Ok(l.clone());
    }
    let from = l.dims;
    let mut labels = Vec::with_capacity(target.voxels());
    for z in 0..target.depth {
        let sz = nearest_index(z, from.depth, target.depth);
        for y in 0..target.height {
            let sy = nearest_index(y, from.height, target.height);
            for x in 0..target.width {
                labels.push(l.labels[from.index(nearest_index(x, from.width, target.width), sy, sz)]);
            }
        }
    }
    Ok(LabelVolume { dims: target, labels })
}
