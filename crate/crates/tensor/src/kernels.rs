//! Forward/backward kernels for the non-convolutional ops.

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

/// Per-(batch, group) statistics saved by the group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalisation over `[N, C, ...]` with per-channel affine parameters.
pub fn group_norm_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let c = x.channels();
    if x.shape().len() < 2 || groups == 0 || c % groups != 0 {
        return Err(TensorError::Geometry {
            op: "group_norm",
            reason: format!("{groups} groups do not divide {c} channels"),
        });
    }
    if gamma.len() != c || beta.len() != c {
        return Err(mismatch("group_norm affine", gamma.shape(), &[c]));
    }
    let s = x.spatial_len();
    let per_group = (c / groups) * s;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = GroupStats { mean: Vec::new(), rstd: Vec::new() };
    for (gi, chunk) in x.data().chunks(per_group).enumerate() {
        let mut sum = 0.0f64;
        for &v in chunk {
            sum += v.to_f64_lossy();
        }
        let mean = sum / per_group as f64;
        let mut var = 0.0f64;
        for &v in chunk {
            let d = v.to_f64_lossy() - mean;
            var += d * d;
        }
        var /= per_group as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let (mean_t, rstd_t) = (T::from_f64_lossy(mean), T::from_f64_lossy(rstd));
        stats.mean.push(mean_t);
        stats.rstd.push(rstd_t);
        let dst = &mut out.data_mut()[gi * per_group..(gi + 1) * per_group];
        let group = gi % groups;
        for (j, (d, &v)) in dst.iter_mut().zip(chunk).enumerate() {
            let ch = group * (c / groups) + j / s;
            *d = (v - mean_t) * rstd_t * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((out, stats))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn group_norm_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
    groups: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let s = x.spatial_len();
    let cpg = c / groups;
    let per_group = cpg * s;
    let m = T::from_usize(per_group).unwrap();
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(gamma.shape());
    let mut gbeta = Tensor::zeros(gamma.shape());
    for gi in 0..stats.mean.len() {
        let group = gi % groups;
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let xs = &x.data()[gi * per_group..(gi + 1) * per_group];
        let gs = &grad_out.data()[gi * per_group..(gi + 1) * per_group];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..per_group {
            let ch = group * cpg + j / s;
            let xhat = (xs[j] - mean) * rstd;
            let dxhat = gs[j] * gamma.data()[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            ggamma.data_mut()[ch] += gs[j] * xhat;
            gbeta.data_mut()[ch] += gs[j];
        }
        let dst = &mut gx.data_mut()[gi * per_group..(gi + 1) * per_group];
        for j in 0..per_group {
            let ch = group * cpg + j / s;
            let xhat = (xs[j] - mean) * rstd;
            let dxhat = gs[j] * gamma.data()[ch];
            dst[j] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (gx, ggamma, gbeta)
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Float>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Float>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Nearest-neighbour x2 upsampling of `[N, C, D, H, W]`.
pub fn upsample2_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 5 {
        return Err(TensorError::Geometry { op: "upsample2", reason: format!("expected 5-d input, got {sh:?}") });
    }
    let (d, h, w) = (sh[2], sh[3], sh[4]);
    let mut out = Tensor::zeros(&[sh[0], sh[1], 2 * d, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for plane in 0..sh[0] * sh[1] {
        let base = plane * d * h * w;
        for z in 0..2 * d {
            for y in 0..2 * h {
                let row = base + ((z / 2) * h + y / 2) * w;
                for xx in 0..2 * w {
                    dst[o] = src[row + xx / 2];
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Float>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (d, h, w) = (input_shape[2], input_shape[3], input_shape[4]);
    let mut gx = Tensor::zeros(input_shape);
    let src = grad_out.data();
    let dst = gx.data_mut();
    let mut o = 0;
    for plane in 0..input_shape[0] * input_shape[1] {
        let base = plane * d * h * w;
        for z in 0..2 * d {
            for y in 0..2 * h {
                let row = base + ((z / 2) * h + y / 2) * w;
                for xx in 0..2 * w {
                    dst[row + xx / 2] += src[o];
                    o += 1;
                }
            }
        }
    }
    gx
}

/// Fully connected layer on `[N, F]` with weight `[O, F]` and bias `[O]`.
///
/// Rows are evaluated independently so results do not depend on batch size.
pub fn linear_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.len() != ws[0] {
        return Err(mismatch("linear", xs, ws));
    }
    let (n, f, o) = (xs[0], xs[1], ws[0]);
    let mut out = Tensor::zeros(&[n, o]);
    for r in 0..n {
        let dst = &mut out.data_mut()[r * o..(r + 1) * o];
        dst.copy_from_slice(b.data());
        gemm(MatRef::new(&x.data()[r * f..(r + 1) * f], 1, f), MatRef::t(w.data(), o, f), T::one(), dst);
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[o]);
    gemm(MatRef::new(grad_out.data(), n, o), MatRef::new(w.data(), o, f), T::zero(), gx.data_mut());
    gemm(MatRef::t(grad_out.data(), n, o), MatRef::new(x.data(), n, f), T::zero(), gw.data_mut());
    for r in 0..n {
        for (acc, &g) in gb.data_mut().iter_mut().zip(&grad_out.data()[r * o..(r + 1) * o]) {
            *acc += g;
        }
    }
    (gx, gw, gb)
}

/// Multi-head dot-product self-attention over the spatial positions.
///
/// `qkv` is `[N, 3C, ...]` holding queries, keys and values as consecutive
/// channel blocks. Returns the attended values `[N, C, ...]` and the softmax
/// weights, laid out `[N, heads, S, S]` with rows indexed by query.
pub fn attention_forward<T: Float>(qkv: &Tensor<T>, heads: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let sh = qkv.shape();
    let c3 = qkv.channels();
    if sh.len() < 3 || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
        return Err(TensorError::Geometry {
            op: "attention",
            reason: format!("{c3} packed channels cannot split into q/k/v with {heads} heads"),
        });
    }
    let c = c3 / 3;
    let dh = c / heads;
    let s = qkv.spatial_len();
    let n = qkv.batch();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut out_shape = sh.to_vec();
    out_shape[1] = c;
    let mut out = Tensor::zeros(&out_shape);
    let mut probs = vec![T::zero(); n * heads * s * s];
    for b in 0..n {
        let item = &qkv.data()[b * c3 * s..(b + 1) * c3 * s];
        for h in 0..heads {
            let q = &item[(h * dh) * s..(h * dh + dh) * s];
            let k = &item[(c + h * dh) * s..(c + h * dh + dh) * s];
            let v = &item[(2 * c + h * dh) * s..(2 * c + h * dh + dh) * s];
            let p = &mut probs[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            gemm(MatRef::t(q, dh, s), MatRef::new(k, dh, s), T::zero(), p);
            for row in p.chunks_mut(s) {
                let mut max = T::neg_infinity();
                for v in row.iter_mut() {
                    *v *= scale;
                    if *v > max {
                        max = *v;
                    }
                }
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            let dst = &mut out.data_mut()[(b * c + h * dh) * s..(b * c + h * dh + dh) * s];
            gemm(MatRef::new(v, dh, s), MatRef::t(p, s, s), T::zero(), dst);
        }
    }
    Ok((out, probs))
}

pub fn attention_backward<T: Float>(qkv: &Tensor<T>, probs: &[T], heads: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let c3 = qkv.channels();
    let c = c3 / 3;
    let dh = c / heads;
    let s = qkv.spatial_len();
    let n = qkv.batch();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut gqkv = Tensor::zeros(qkv.shape());
    let mut dp = vec![T::zero(); s * s];
    for b in 0..n {
        let item = &qkv.data()[b * c3 * s..(b + 1) * c3 * s];
        let gitem_off = b * c3 * s;
        for h in 0..heads {
            let q = &item[(h * dh) * s..(h * dh + dh) * s];
            let k = &item[(c + h * dh) * s..(c + h * dh + dh) * s];
            let v = &item[(2 * c + h * dh) * s..(2 * c + h * dh + dh) * s];
            let p = &probs[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            let go = &grad_out.data()[(b * c + h * dh) * s..(b * c + h * dh + dh) * s];
            let g = gqkv.data_mut();
            {
                let gv = &mut g[gitem_off + (2 * c + h * dh) * s..gitem_off + (2 * c + h * dh + dh) * s];
                gemm(MatRef::new(go, dh, s), MatRef::new(p, s, s), T::zero(), gv);
            }
            gemm(MatRef::t(go, dh, s), MatRef::new(v, dh, s), T::zero(), &mut dp);
            for (prow, drow) in p.chunks(s).zip(dp.chunks_mut(s)) {
                let mut dot = T::zero();
                for (&pv, &dv) in prow.iter().zip(drow.iter()) {
                    dot += pv * dv;
                }
                for (&pv, dv) in prow.iter().zip(drow.iter_mut()) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            {
                let gq = &mut g[gitem_off + (h * dh) * s..gitem_off + (h * dh + dh) * s];
                gemm(MatRef::new(k, dh, s), MatRef::t(&dp, s, s), T::zero(), gq);
            }
            {
                let gk = &mut g[gitem_off + (c + h * dh) * s..gitem_off + (c + h * dh + dh) * s];
                gemm(MatRef::new(q, dh, s), MatRef::new(&dp, s, s), T::zero(), gk);
            }
        }
    }
    gqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn group_norm_standardises_each_group() {
        let x = random(&[2, 6, 3, 4, 5], 11).map(|v| 3.0 * v + 1.5);
        let gamma = Tensor::full(&[6], 1.0);
        let beta = Tensor::zeros(&[6]);
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 3, 1e-5).unwrap();
        for chunk in y.data().chunks(2 * 60) {
            let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let v = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / chunk.len() as f64;
            assert!(m.abs() < 1e-4, "group mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "group variance {v}");
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2, 2]);
        let g = Tensor::full(&[6], 1.0);
        assert!(group_norm_forward(&x, &g, &g, 4, 1e-5).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let qkv = random(&[2, 12, 2, 3, 2], 5);
        let (out, probs) = attention_forward(&qkv, 2).unwrap();
        assert_eq!(out.shape(), &[2, 4, 2, 3, 2]);
        for row in probs.chunks(12) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = random(&[1, 2, 2, 3, 2], 9);
        let y = upsample2_forward(&x).unwrap();
        let g = random(y.shape(), 10);
        let gx = upsample2_backward(x.shape(), &g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn silu_gradient_matches_central_difference() {
        for &v in &[-4.0f64, -0.3, 0.0, 0.7, 5.0] {
            let h = 1e-6;
            let fd = (silu(v + h) - silu(v - h)) / (2.0 * h);
            assert!((fd - silu_grad(v)).abs() < 1e-8);
        }
    }
}
