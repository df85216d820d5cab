//! 3D cross-correlation kernels.
//!
//! [`conv3d_reference`] is the direct seven-loop definition and serves as the
//! oracle. [`conv3d_fast`] runs the direct kernels of `direct.rs` for the
//! common `3^3`, stride 1, padding 1 case and otherwise lowers each batch
//! item to an `im2col` buffer and a single matrix multiply; the backward
//! kernels follow the same split.

use crate::error::{Result, TensorError};
use crate::direct;
use crate::float::{gemm, Float, MatRef};
use crate::tensor::Tensor;

/// Shape arithmetic for a 3D convolution with uniform stride and zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input extent as `[depth, height, width]`.
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 5 || weight.len() != 5 {
            return Err(TensorError::Geometry {
                op: "conv3d",
                reason: format!("expected 5-d input and weight, got {input:?} and {weight:?}"),
            });
        }
        if input[1] != weight[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Geometry { op: "conv3d", reason: "stride must be positive".into() });
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = input[2 + axis] + 2 * padding;
            let k = weight[2 + axis];
            if k == 0 || padded < k {
                return Err(TensorError::Geometry {
                    op: "conv3d",
                    reason: format!("kernel {k} does not fit padded extent {padded} on axis {axis}"),
                });
            }
            output[axis] = (padded - k) / stride + 1;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            input: [input[2], input[3], input[4]],
            kernel: [weight[2], weight[3], weight[4]],
            output,
            stride,
            padding,
        })
    }

    pub fn input_spatial(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_spatial(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the lowered matrix: `in_channels * kd * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn is_same3(&self) -> bool {
        self.kernel == [3, 3, 3] && self.stride == 1 && self.padding == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.padding == 0
    }
}

fn check_bias<T: Float>(geom: &ConvGeometry, bias: Option<&Tensor<T>>) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != geom.out_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                left: b.shape().to_vec(),
                right: vec![geom.out_channels],
            });
        }
    }
    Ok(())
}

/// Direct definition of 3D cross-correlation, accumulated in `f64`.
pub fn conv3d_reference<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    check_bias(&g, bias)?;
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let x = input.data();
    let w = weight.data();
    let mut out = Tensor::zeros(&g.output_shape());
    let o = out.data_mut();
    let pad = padding as isize;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let b0 = bias.map_or(0.0, |b| b.data()[co].to_f64_lossy());
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b0;
                        for ci in 0..g.in_channels {
                            for kz in 0..kd {
                                let iz = (oz * stride + kz) as isize - pad;
                                if iz < 0 || iz >= id as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        let xi = (((n * g.in_channels + ci) * id + iz as usize) * ih
                                            + iy as usize)
                                            * iw
                                            + ix as usize;
                                        let wi = (((co * g.in_channels + ci) * kd + kz) * kh + ky) * kw + kx;
                                        acc += x[xi].to_f64_lossy() * w[wi].to_f64_lossy();
                                    }
                                }
                            }
                        }
                        o[(((n * g.out_channels + co) * od + oz) * oh + oy) * ow + ox] = T::from_f64_lossy(acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad` lies inside `[0, extent)`.
fn valid_range(k: usize, stride: usize, pad: isize, extent: usize, out: usize) -> (usize, usize) {
    let k = k as isize;
    let s = stride as isize;
    // smallest ox with ox*s + k - pad >= 0
    let lo = if pad - k <= 0 { 0 } else { (pad - k + s - 1) / s };
    // largest ox with ox*s + k - pad <= extent - 1
    let top = extent as isize - 1 + pad - k;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    (lo.min(out as isize) as usize, hi.clamp(0, out as isize) as usize)
}

/// Lower one batch item (`in_channels * D * H * W`) into `col` (`col_rows x P`).
fn im2col<T: Float>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.output_spatial();
    let s = g.stride;
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = (oz * s + kz) as isize - pad;
                        for oy in 0..oh {
                            let seg = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let iy = (oy * s + ky) as isize - pad;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                seg.fill(T::zero());
                                continue;
                            }
                            let src = &plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let (lo, hi) = valid_range(kx, s, pad, iw, ow);
                            seg[..lo].fill(T::zero());
                            seg[hi.max(lo)..].fill(T::zero());
                            if s == 1 {
                                let start = (lo as isize + kx as isize - pad) as usize;
                                seg[lo..hi.max(lo)].copy_from_slice(&src[start..start + hi.saturating_sub(lo)]);
                            } else {
                                for ox in lo..hi {
                                    seg[ox] = src[ox * s + kx - pad as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into one batch item.
fn col2im<T: Float>(col: &[T], g: &ConvGeometry, x: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let p = g.output_spatial();
    let s = g.stride;
    let pad = g.padding as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let plane = &mut x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let srcrow = &col[row * p..(row + 1) * p];
                    for oz in 0..od {
                        let iz = (oz * s + kz) as isize - pad;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let seg = &srcrow[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst = &mut plane[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let (lo, hi) = valid_range(kx, s, pad, iw, ow);
                            for ox in lo..hi {
                                dst[ox * s + kx - pad as usize] += seg[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `im2col` + matrix-multiply convolution; semantically identical to [`conv3d_reference`].
pub fn conv3d_fast<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    check_bias(&g, bias)?;
    let k = g.col_rows();
    let p = g.output_spatial();
    let in_item = g.in_channels * g.input_spatial();
    let out_item = g.out_channels * p;
    let mut out = Tensor::zeros(&g.output_shape());
    if g.is_same3() {
        for n in 0..g.batch {
            direct::conv3_forward(
                &input.data()[n * in_item..(n + 1) * in_item],
                weight.data(),
                bias.map(Tensor::data),
                g.in_channels,
                g.out_channels,
                g.input,
                &mut out.data_mut()[n * out_item..(n + 1) * out_item],
            );
        }
        return Ok(out);
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.batch {
        let x = &input.data()[n * in_item..(n + 1) * in_item];
        let o = &mut out.data_mut()[n * out_item..(n + 1) * out_item];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let lowered: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm(MatRef::new(weight.data(), g.out_channels, k), MatRef::new(lowered, k, p), beta, o);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv3d_fast`] given the upstream gradient `grad_out`.
pub fn conv3d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d backward",
            left: grad_out.shape().to_vec(),
            right: g.output_shape(),
        });
    }
    let k = g.col_rows();
    let p = g.output_spatial();
    let in_item = g.in_channels * g.input_spatial();
    let out_item = g.out_channels * p;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g.out_channels]);
    let mut gin = need_input.then(|| Tensor::zeros(input.shape()));
    let pointwise = g.is_pointwise();
    let mut col = if pointwise || g.is_same3() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.batch {
        let x = &input.data()[n * in_item..(n + 1) * in_item];
        let go = &grad_out.data()[n * out_item..(n + 1) * out_item];
        for (co, chunk) in go.chunks(p).enumerate() {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            gb.data_mut()[co] += acc;
        }
        if g.is_same3() {
            direct::conv3_grad_weight(x, go, g.in_channels, g.out_channels, g.input, gw.data_mut());
            if let Some(gi) = gin.as_mut() {
                let dst = &mut gi.data_mut()[n * in_item..(n + 1) * in_item];
                direct::conv3_grad_input(go, weight.data(), g.in_channels, g.out_channels, g.input, dst);
            }
            continue;
        }
        let lowered: &[T] = if pointwise {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        gemm(MatRef::new(go, g.out_channels, p), MatRef::t(lowered, k, p), T::one(), gw.data_mut());
        if let Some(gi) = gin.as_mut() {
            let dst = &mut gi.data_mut()[n * in_item..(n + 1) * in_item];
            let wt = MatRef::t(weight.data(), g.out_channels, k);
            if pointwise {
                gemm(wt, MatRef::new(go, g.out_channels, p), T::zero(), dst);
            } else {
                gemm(wt, MatRef::new(go, g.out_channels, p), T::zero(), &mut col);
                col2im(&col, &g, dst);
            }
        }
    }
    Ok(ConvGrads { input: gin, weight: gw, bias: gb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pointwise_unit_kernel_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 3, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv3d_reference(&x, &w, Some(&b), 1, 0).unwrap(), x);
        assert_eq!(conv3d_fast(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_interior_neighbours() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let out = conv3d_reference(&x, &w, None, 1, 1).unwrap();
        let idx = |z: usize, y: usize, x: usize| (z * 5 + y) * 5 + x;
        assert_eq!(out.data()[idx(2, 2, 2)], 27.0);
        assert_eq!(out.data()[idx(0, 0, 0)], 8.0);
        assert_eq!(out.data()[idx(0, 2, 2)], 18.0);
    }

    #[test]
    fn geometry_rejects_oversized_kernel_and_channel_mismatch() {
        assert!(ConvGeometry::new(&[1, 1, 2, 2, 2], &[1, 1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new(&[1, 2, 4, 4, 4], &[1, 2, 3, 3, 3], 0, 1).is_err());
        let g = ConvGeometry::new(&[2, 3, 16, 16, 16], &[8, 3, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [8, 8, 8]);
    }

    #[test]
    fn strided_fast_matches_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 6, 5, 7], &mut rng);
        let w = random(&[4, 3, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let r = conv3d_reference(&x, &w, Some(&b), 2, 1).unwrap();
        let f = conv3d_fast(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(r.shape(), f.shape());
        for (a, b) in r.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <conv(x), g> is bilinear: d/dx and d/dw must reproduce it exactly.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 2)] {
            let x = random(&[2, 2, 5, 4, 6], &mut rng);
            let w = random(&[3, 2, k, k, k], &mut rng);
            let y = conv3d_fast(&x, &w, None, stride, pad).unwrap();
            let go = random(y.shape(), &mut rng);
            let grads = conv3d_backward(&x, &w, &go, stride, pad, true).unwrap();
            let inner: f64 = y.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(grads.input.unwrap().data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(grads.weight.data()).map(|(a, b)| a * b).sum();
            assert!((inner - via_x).abs() < 1e-9, "input adjoint {inner} vs {via_x}");
            assert!((inner - via_w).abs() < 1e-9, "weight adjoint {inner} vs {via_w}");
            let bias_sum: f64 = go.data().iter().sum();
            assert!((grads.bias.data().iter().sum::<f64>() - bias_sum).abs() < 1e-9);
        }
    }
}
