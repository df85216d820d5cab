//! Direct kernels for the dominant case: `3^3` convolution, stride 1,
//! padding 1. The input is copied once into a zero-padded buffer whose rows
//! are rounded up to whole vectors, so the inner loops have no boundary
//! tests. Output tiles hold `COB` output channels by `NV` row vectors of `L`
//! lanes; on x86 with AVX2+FMA the same code is compiled with fused
//! multiply-add.

use crate::float::Float;

const L: usize = 8;
const COB: usize = 4;
const NV: usize = 2;
const TAPS: usize = 27;

/// Spatial layout of one channel of the padded input.
#[derive(Clone, Copy)]
struct Padded {
    d: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
}

impl Padded {
    fn new([d, h, w]: [usize; 3]) -> Self {
        // rows rounded up to whole vectors so tail loads stay in padding
        Self { d, h, w, hp: h + 2, wp: w.div_ceil(L) * L + 2 }
    }

    fn plane(&self) -> usize {
        (self.d + 2) * self.hp * self.wp
    }

    fn tap_offsets(&self) -> [usize; TAPS] {
        let mut t = [0; TAPS];
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    t[(kz * 3 + ky) * 3 + kx] = kz * self.hp * self.wp + ky * self.wp + kx;
                }
            }
        }
        t
    }

    /// `(y, x_start)` of every output row vector within one z-slice.
    fn vectors(&self) -> Vec<(usize, usize)> {
        (0..self.h).flat_map(|y| (0..self.w).step_by(L).map(move |xs| (y, xs))).collect()
    }

    fn pad<T: Float>(&self, x: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); channels * self.plane()];
        let spatial = self.d * self.h * self.w;
        for c in 0..channels {
            let src = &x[c * spatial..(c + 1) * spatial];
            let dst = &mut out[c * self.plane()..(c + 1) * self.plane()];
            for z in 0..self.d {
                for y in 0..self.h {
                    let s = (z * self.h + y) * self.w;
                    let o = ((z + 1) * self.hp + y + 1) * self.wp + 1;
                    dst[o..o + self.w].copy_from_slice(&src[s..s + self.w]);
                }
            }
        }
        out
    }
}

/// Weights `[cout, cin, 27]` repacked as `[cout/COB][cin][27][COB]`, zero
/// filled past `cout`. With `flip`, the input/output roles are swapped and the
/// taps reversed, which turns the layer into its own input-gradient operator.
fn pack_weights<T: Float>(w: &[T], cout: usize, cin: usize, flip: bool) -> (Vec<T>, usize, usize) {
    let (rows, cols) = if flip { (cin, cout) } else { (cout, cin) };
    let blocks = rows.div_ceil(COB);
    let mut out = vec![T::zero(); blocks * cols * TAPS * COB];
    for r in 0..rows {
        for c in 0..cols {
            for tap in 0..TAPS {
                let v = if flip { w[(c * cin + r) * TAPS + TAPS - 1 - tap] } else { w[(r * cin + c) * TAPS + tap] };
                out[(((r / COB) * cols + c) * TAPS + tap) * COB + r % COB] = v;
            }
        }
    }
    (out, rows, cols)
}

#[inline(always)]
fn madd<T: Float, const FMA: bool>(a: T, b: T, acc: T) -> T {
    if FMA {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[inline(always)]
fn forward_impl<T: Float, const FMA: bool>(
    xpad: &[T],
    geo: Padded,
    wpk: &[T],
    rows: usize,
    cols: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let taps = geo.tap_offsets();
    let vectors = geo.vectors();
    let spatial = geo.d * geo.h * geo.w;
    let plane = geo.plane();
    for cb in 0..rows.div_ceil(COB) {
        let mut init = [T::zero(); COB];
        if let Some(b) = bias {
            for (c, v) in init.iter_mut().enumerate() {
                if cb * COB + c < rows {
                    *v = b[cb * COB + c];
                }
            }
        }
        let wblock = &wpk[cb * cols * TAPS * COB..(cb + 1) * cols * TAPS * COB];
        for z in 0..geo.d {
            for tile in vectors.chunks(NV) {
                let mut offs = [0usize; NV];
                for (v, &(y, xs)) in tile.iter().enumerate() {
                    offs[v] = (z * geo.hp + y) * geo.wp + xs;
                }
                for v in tile.len()..NV {
                    offs[v] = offs[0];
                }
                let mut acc = [[[T::zero(); L]; NV]; COB];
                for (c, a) in acc.iter_mut().enumerate() {
                    for vec in a.iter_mut() {
                        *vec = [init[c]; L];
                    }
                }
                for ci in 0..cols {
                    let xb = &xpad[ci * plane..(ci + 1) * plane];
                    let wb = &wblock[ci * TAPS * COB..(ci + 1) * TAPS * COB];
                    for (tap, &toff) in taps.iter().enumerate() {
                        let wv: &[T; COB] = wb[tap * COB..(tap + 1) * COB].try_into().unwrap();
                        for v in 0..NV {
                            let s = offs[v] + toff;
                            let src: &[T; L] = xb[s..s + L].try_into().unwrap();
                            for c in 0..COB {
                                for l in 0..L {
                                    acc[c][v][l] = madd::<T, FMA>(wv[c], src[l], acc[c][v][l]);
                                }
                            }
                        }
                    }
                }
                for c in 0..COB.min(rows - cb * COB) {
                    let co = cb * COB + c;
                    for (v, &(y, xs)) in tile.iter().enumerate() {
                        let n = L.min(geo.w - xs);
                        let o = co * spatial + (z * geo.h + y) * geo.w + xs;
                        out[o..o + n].copy_from_slice(&acc[c][v][..n]);
                    }
                }
            }
        }
    }
}

/// `gop` is the output gradient packed as `[cout/COB][z][vector][COB][L]`,
/// zero past `cout` and past the row end.
#[inline(always)]
fn grad_weight_impl<T: Float, const FMA: bool>(
    xpad: &[T],
    geo: Padded,
    gop: &[T],
    cout: usize,
    cin: usize,
    gw: &mut [T],
) {
    let vectors = geo.vectors();
    let plane = geo.plane();
    let block = geo.d * vectors.len() * COB * L;
    for cb in 0..cout.div_ceil(COB) {
        let gblock = &gop[cb * block..(cb + 1) * block];
        for ci in 0..cin {
            let xb = &xpad[ci * plane..(ci + 1) * plane];
            for kz in 0..3 {
                for ky in 0..3 {
                    let base = kz * geo.hp * geo.wp + ky * geo.wp;
                    let mut acc = [[[T::zero(); L]; 3]; COB];
                    let mut gchunks = gblock.chunks_exact(COB * L);
                    for z in 0..geo.d {
                        for &(y, xs) in &vectors {
                            let g = gchunks.next().unwrap();
                            let x_off = (z * geo.hp + y) * geo.wp + xs + base;
                            for kx in 0..3 {
                                let xv: &[T; L] = xb[x_off + kx..x_off + kx + L].try_into().unwrap();
                                for c in 0..COB {
                                    let gc: &[T; L] = g[c * L..(c + 1) * L].try_into().unwrap();
                                    for l in 0..L {
                                        acc[c][kx][l] = madd::<T, FMA>(gc[l], xv[l], acc[c][kx][l]);
                                    }
                                }
                            }
                        }
                    }
                    for c in 0..COB.min(cout - cb * COB) {
                        let co = cb * COB + c;
                        for kx in 0..3 {
                            let mut s = T::zero();
                            for &v in &acc[c][kx] {
                                s += v;
                            }
                            gw[(co * cin + ci) * TAPS + (kz * 3 + ky) * 3 + kx] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_fma<T: Float>(
    xpad: &[T],
    geo: Padded,
    wpk: &[T],
    rows: usize,
    cols: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    forward_impl::<T, true>(xpad, geo, wpk, rows, cols, bias, out)
}

/// Explicit AVX2 version of [`grad_weight_impl`] for `f32`; the shifted
/// loads defeat the auto-vectoriser.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn grad_weight_avx2(xpad: &[f32], geo: Padded, gop: &[f32], cout: usize, cin: usize, gw: &mut [f32]) {
    use std::arch::x86_64::*;
    let vectors = geo.vectors();
    let plane = geo.plane();
    let block = geo.d * vectors.len() * COB * L;
    assert!(xpad.len() >= cin * plane && gop.len() >= cout.div_ceil(COB) * block);
    assert!(gw.len() >= cout * cin * TAPS);
    for cb in 0..cout.div_ceil(COB) {
        let gp = gop.as_ptr().add(cb * block);
        for ci in 0..cin {
            for kz in 0..3 {
                for ky in 0..3 {
                    let xp = xpad.as_ptr().add(ci * plane + kz * geo.hp * geo.wp + ky * geo.wp);
                    let mut acc = [[_mm256_setzero_ps(); 3]; COB];
                    let mut idx = 0;
                    for z in 0..geo.d {
                        for &(y, xs) in &vectors {
                            // highest read: padded row end, inside the plane
                            let xo = xp.add((z * geo.hp + y) * geo.wp + xs);
                            let x0 = _mm256_loadu_ps(xo);
                            let x1 = _mm256_loadu_ps(xo.add(1));
                            let x2 = _mm256_loadu_ps(xo.add(2));
                            let g = gp.add(idx * COB * L);
                            for (c, a) in acc.iter_mut().enumerate() {
                                let gv = _mm256_loadu_ps(g.add(c * L));
                                a[0] = _mm256_fmadd_ps(gv, x0, a[0]);
                                a[1] = _mm256_fmadd_ps(gv, x1, a[1]);
                                a[2] = _mm256_fmadd_ps(gv, x2, a[2]);
                            }
                            idx += 1;
                        }
                    }
                    for (c, a) in acc.iter().enumerate().take(COB.min(cout - cb * COB)) {
                        let co = cb * COB + c;
                        for (kx, v) in a.iter().enumerate() {
                            let mut lanes = [0f32; L];
                            _mm256_storeu_ps(lanes.as_mut_ptr(), *v);
                            let mut s = 0f32;
                            for l in lanes {
                                s += l;
                            }
                            gw[(co * cin + ci) * TAPS + (kz * 3 + ky) * 3 + kx] += s;
                        }
                    }
                }
            }
        }
    }
}

fn as_f32<T: Float>(s: &[T]) -> Option<&[f32]> {
    (std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>())
        // SAFETY: T is f32.
        .then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast::<f32>(), s.len()) })
}

fn as_f32_mut<T: Float>(s: &mut [T]) -> Option<&mut [f32]> {
    (std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>())
        // SAFETY: T is f32.
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast::<f32>(), s.len()) })
}

fn has_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn run_forward<T: Float>(xpad: &[T], geo: Padded, wpk: &[T], rows: usize, cols: usize, bias: Option<&[T]>, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { forward_fma(xpad, geo, wpk, rows, cols, bias, out) };
        return;
    }
    forward_impl::<T, false>(xpad, geo, wpk, rows, cols, bias, out)
}

/// One batch item: `x` is `[cin, d, h, w]`, `w` is `[cout, cin, 3, 3, 3]`,
/// `out` is `[cout, d, h, w]` and is overwritten.
pub(crate) fn conv3_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, cin: usize, cout: usize, dims: [usize; 3], out: &mut [T]) {
    let geo = Padded::new(dims);
    let xpad = geo.pad(x, cin);
    let (wpk, rows, cols) = pack_weights(w, cout, cin, false);
    run_forward(&xpad, geo, &wpk, rows, cols, bias, out);
}

/// Input gradient for one batch item: correlation of `go` with the
/// transposed, tap-reversed kernel. `gin` is overwritten.
pub(crate) fn conv3_grad_input<T: Float>(go: &[T], w: &[T], cin: usize, cout: usize, dims: [usize; 3], gin: &mut [T]) {
    let geo = Padded::new(dims);
    let gpad = geo.pad(go, cout);
    let (wpk, rows, cols) = pack_weights(w, cout, cin, true);
    run_forward(&gpad, geo, &wpk, rows, cols, None, gin);
}

/// Accumulates the weight gradient of one batch item into `gw`.
pub(crate) fn conv3_grad_weight<T: Float>(x: &[T], go: &[T], cin: usize, cout: usize, dims: [usize; 3], gw: &mut [T]) {
    let geo = Padded::new(dims);
    let xpad = geo.pad(x, cin);
    let vectors = geo.vectors();
    let spatial = geo.d * geo.h * geo.w;
    debug_assert_eq!(go.len(), cout * spatial);
    let mut gop = vec![T::zero(); cout.div_ceil(COB) * geo.d * vectors.len() * COB * L];
    for co in 0..cout {
        let (cb, c) = (co / COB, co % COB);
        for z in 0..geo.d {
            for (vi, &(y, xs)) in vectors.iter().enumerate() {
                let n = L.min(geo.w - xs);
                let src = co * spatial + (z * geo.h + y) * geo.w + xs;
                let dst = ((cb * geo.d + z) * vectors.len() + vi) * COB * L + c * L;
                gop[dst..dst + n].copy_from_slice(&go[src..src + n]);
            }
        }
    }
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        if let (Some(x), Some(g)) = (as_f32(&xpad), as_f32(&gop)) {
            let out = as_f32_mut(gw).expect("same element type");
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { grad_weight_avx2(x, geo, g, cout, cin, out) };
            return;
        }
    }
    grad_weight_impl::<T, false>(&xpad, geo, &gop, cout, cin, gw)
}
