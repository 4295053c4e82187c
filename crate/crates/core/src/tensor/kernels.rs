//! Slice-level forward and backward kernels over `C x H x W` planes.
//!
//! Every kernel uses a fixed loop order so results are bit-reproducible.

use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

/// Output channels computed together by the blocked kernels.
const OB: usize = 4;
/// Output columns per register tile.
const XB: usize = 16;

/// Copies `c` planes into a zero border of width `p`.
fn pad_planes<T: Scalar>(c: usize, h: usize, w: usize, p: usize, input: &[T]) -> Vec<T> {
    if p == 0 {
        return input[..c * h * w].to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let dst = (ch * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&input[(ch * h + y) * w..][..w]);
        }
    }
    out
}

/// Reorders `out_c x in_c x k x k` weights into blocks of `OB` output
/// channels, innermost, zero-filled past `out_c`. With `flip` the kernel is
/// rotated by 180 degrees and the channel roles swapped, which turns the
/// forward correlation into its input adjoint.
fn pack_weights<T: Scalar>(
    out_c: usize,
    in_c: usize,
    k: usize,
    weight: &[T],
    flip: bool,
) -> Vec<T> {
    let (oc_n, ic_n) = if flip { (in_c, out_c) } else { (out_c, in_c) };
    let blocks = oc_n.div_ceil(OB);
    let mut packed = vec![T::zero(); blocks * ic_n * k * k * OB];
    for o in 0..oc_n {
        for i in 0..ic_n {
            for ky in 0..k {
                for kx in 0..k {
                    let src = if flip {
                        ((i * in_c + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)
                    } else {
                        ((o * in_c + i) * k + ky) * k + kx
                    };
                    let dst = ((((o / OB) * ic_n + i) * k + ky) * k + kx) * OB + o % OB;
                    packed[dst] = weight[src];
                }
            }
        }
    }
    packed
}

struct Corr<'a, T> {
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
    /// `in_c x (h + k - 1) x (w + k - 1)`.
    padded: &'a [T],
    packed: &'a [T],
    bias: Option<&'a [T]>,
}

type TileFn<T> = fn(&[T], usize, &[usize], &[T], &[T; OB]) -> [[T; XB]; OB];

/// Accumulates one `OB x XB` output tile over every kernel tap.
#[inline(always)]
fn tile<T: Scalar>(
    padded: &[T],
    base: usize,
    taps: &[usize],
    wblk: &[T],
    init: &[T; OB],
) -> [[T; XB]; OB] {
    let mut acc = [[T::zero(); XB]; OB];
    for o in 0..OB {
        acc[o] = [init[o]; XB];
    }
    for (t, &off) in taps.iter().enumerate() {
        let seg: &[T; XB] = padded[base + off..base + off + XB].try_into().unwrap();
        let wv: &[T; OB] = wblk[t * OB..t * OB + OB].try_into().unwrap();
        for o in 0..OB {
            let a = wv[o];
            for j in 0..XB {
                acc[o][j] += a * seg[j];
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tile_avx2<T: Scalar>(
    padded: &[T],
    base: usize,
    taps: &[usize],
    wblk: &[T],
    init: &[T; OB],
) -> [[T; XB]; OB] {
    tile(padded, base, taps, wblk, init)
}

fn tile_plain<T: Scalar>(
    padded: &[T],
    base: usize,
    taps: &[usize],
    wblk: &[T],
    init: &[T; OB],
) -> [[T; XB]; OB] {
    tile(padded, base, taps, wblk, init)
}

fn correlate<T: Scalar>(c: &Corr<'_, T>) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        return correlate_with(c, |p, b, t, w, i| unsafe { tile_avx2(p, b, t, w, i) });
    }
    correlate_with(c, tile_plain)
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

fn correlate_with<T: Scalar>(c: &Corr<'_, T>, tile_fn: TileFn<T>) -> Vec<T> {
    let (h, w, k) = (c.h, c.w, c.k);
    let (hp, wp) = (h + k - 1, w + k - 1);
    let plane = h * w;
    let mut out = vec![T::zero(); c.out_c * plane];
    let taps: Vec<usize> = (0..c.in_c)
        .flat_map(|ic| (0..k).flat_map(move |ky| (0..k).map(move |kx| (ic * hp + ky) * wp + kx)))
        .collect();
    let wstride = taps.len() * OB;
    for blk in 0..c.out_c.div_ceil(OB) {
        let nb = OB.min(c.out_c - blk * OB);
        let wblk = &c.packed[blk * wstride..(blk + 1) * wstride];
        let mut init = [T::zero(); OB];
        if let Some(b) = c.bias {
            init[..nb].copy_from_slice(&b[blk * OB..blk * OB + nb]);
        }
        for y in 0..h {
            let mut x = 0;
            while x + XB <= w {
                let acc = tile_fn(c.padded, y * wp + x, &taps, wblk, &init);
                for o in 0..nb {
                    out[(blk * OB + o) * plane + y * w + x..][..XB].copy_from_slice(&acc[o]);
                }
                x += XB;
            }
            for xs in x..w {
                let mut acc = init;
                for (t, &off) in taps.iter().enumerate() {
                    let v = c.padded[y * wp + xs + off];
                    for o in 0..OB {
                        acc[o] += wblk[t * OB + o] * v;
                    }
                }
                for o in 0..nb {
                    out[(blk * OB + o) * plane + y * w + xs] = acc[o];
                }
            }
        }
    }
    out
}

/// Columns per chunk in the weight-gradient reduction.
const WB: usize = 8;

/// `sum_x g[o][x] * row[x + kx]` for each `o`.
#[inline(always)]
#[allow(clippy::needless_range_loop)]
fn wgrad_tap<T: Scalar>(g: &[&[T]; OB], row: &[T], kx: usize) -> [T; OB] {
    let w = g[0].len();
    let full = w / WB * WB;
    let mut r = [[T::zero(); WB]; OB];
    let mut x = 0;
    while x < full {
        let seg: &[T; WB] = row[x + kx..x + kx + WB].try_into().unwrap();
        for o in 0..OB {
            let gs: &[T; WB] = g[o][x..x + WB].try_into().unwrap();
            for j in 0..WB {
                r[o][j] += gs[j] * seg[j];
            }
        }
        x += WB;
    }
    let mut out = [T::zero(); OB];
    for o in 0..OB {
        let mut s = T::zero();
        for j in 0..WB {
            s += r[o][j];
        }
        for xs in full..w {
            s += g[o][xs] * row[xs + kx];
        }
        out[o] = s;
    }
    out
}

type WgradFn<T> = fn(&[&[T]; OB], &[T], usize) -> [T; OB];

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn wgrad_tap_avx2<T: Scalar>(g: &[&[T]; OB], row: &[T], kx: usize) -> [T; OB] {
    wgrad_tap(g, row, kx)
}

fn wgrad_tap_plain<T: Scalar>(g: &[&[T]; OB], row: &[T], kx: usize) -> [T; OB] {
    wgrad_tap(g, row, kx)
}

/// `gw[o][i][ky][kx] = sum_{y,x} grad_out[o][y][x] * padded[i][y+ky][x+kx]`.
fn weight_grad<T: Scalar>(d: ConvDims, padded: &[T], grad_out: &[T]) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the required CPU features were detected at runtime.
        return weight_grad_with(d, padded, grad_out, |g, r, kx| unsafe {
            wgrad_tap_avx2(g, r, kx)
        });
    }
    weight_grad_with(d, padded, grad_out, wgrad_tap_plain)
}

fn weight_grad_with<T: Scalar>(
    d: ConvDims,
    padded: &[T],
    grad_out: &[T],
    tap_fn: WgradFn<T>,
) -> Vec<T> {
    let ConvDims {
        in_c,
        out_c,
        h,
        w,
        k,
        ..
    } = d;
    let (hp, wp) = (h + k - 1, w + k - 1);
    let plane = h * w;
    let kk = k * k;
    let mut gw = vec![T::zero(); out_c * in_c * kk];
    let zeros = vec![T::zero(); w];
    let mut acc = vec![[T::zero(); OB]; kk];
    for blk in 0..out_c.div_ceil(OB) {
        let nb = OB.min(out_c - blk * OB);
        for ic in 0..in_c {
            acc.iter_mut().for_each(|a| *a = [T::zero(); OB]);
            for y in 0..h {
                let g: [&[T]; OB] = std::array::from_fn(|o| {
                    if o < nb {
                        &grad_out[(blk * OB + o) * plane + y * w..][..w]
                    } else {
                        &zeros[..]
                    }
                });
                for ky in 0..k {
                    let row = &padded[(ic * hp + y + ky) * wp..][..wp];
                    for kx in 0..k {
                        let r = tap_fn(&g, row, kx);
                        let a = &mut acc[ky * k + kx];
                        for o in 0..OB {
                            a[o] += r[o];
                        }
                    }
                }
            }
            for o in 0..nb {
                for t in 0..kk {
                    gw[((blk * OB + o) * in_c + ic) * kk + t] = acc[t][o];
                }
            }
        }
    }
    gw
}

fn check_same(d: ConvDims) {
    assert!(
        d.k % 2 == 1 && d.pad == (d.k - 1) / 2,
        "kernels assume odd k with same padding"
    );
}

/// Same-size cross-correlation. `input` is `in_c x h x w`, `weight` is
/// `out_c x in_c x k x k`, padding is `(k - 1) / 2` zeros.
pub fn conv2d_forward<T: Scalar>(d: ConvDims, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    check_same(d);
    let padded = pad_planes(d.in_c, d.h, d.w, d.pad, input);
    let packed = pack_weights(d.out_c, d.in_c, d.k, weight, false);
    correlate(&Corr {
        in_c: d.in_c,
        out_c: d.out_c,
        h: d.h,
        w: d.w,
        k: d.k,
        padded: &padded,
        packed: &packed,
        bias: Some(bias),
    })
}

/// Returns `(grad_input, grad_weight, grad_bias)` for [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    d: ConvDims,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    check_same(d);
    let plane = d.h * d.w;
    let gb: Vec<T> = (0..d.out_c)
        .map(|oc| grad_out[oc * plane..(oc + 1) * plane].iter().copied().sum())
        .collect();
    let gpad = pad_planes(d.out_c, d.h, d.w, d.pad, grad_out);
    let flipped = pack_weights(d.out_c, d.in_c, d.k, weight, true);
    let gin = correlate(&Corr {
        in_c: d.out_c,
        out_c: d.in_c,
        h: d.h,
        w: d.w,
        k: d.k,
        padded: &gpad,
        packed: &flipped,
        bias: None,
    });
    let padded = pad_planes(d.in_c, d.h, d.w, d.pad, input);
    let gw = weight_grad(d, &padded, grad_out);
    (gin, gw, gb)
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, for each output,
/// the flat input index that produced it (first maximum in row-major order).
pub fn maxpool2_forward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gin = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        gin[i] += g;
    }
    gin
}

/// One axis of a half-pixel-centred bilinear resampling: for each output
/// index, the two clamped source indices and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let ratio = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let f = src.floor();
            let frac = src - f;
            let a = f as isize;
            Tap {
                i0: a.clamp(0, last) as usize,
                i1: (a + 1).clamp(0, last) as usize,
                w0: 1.0 - frac,
                w1: frac,
            }
        })
        .collect()
}

/// Bilinear resize of a `c x h x w` plane stack to `c x oh x ow`.
pub fn resize_bilinear<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    input: &[T],
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    let mut row = vec![T::zero(); w];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for (y, t) in ty.iter().enumerate() {
            let (w0, w1) = (lit::<T>(t.w0), lit::<T>(t.w1));
            let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
            for ((r, &a), &b) in row.iter_mut().zip(r0).zip(r1) {
                *r = w0 * a + w1 * b;
            }
            let orow = &mut out[(ch * oh + y) * ow..][..ow];
            for (o, s) in orow.iter_mut().zip(&tx) {
                *o = lit::<T>(s.w0) * row[s.i0] + lit::<T>(s.w1) * row[s.i1];
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients with the same weights.
pub fn resize_bilinear_backward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_out: &[T],
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut gin = vec![T::zero(); c * h * w];
    let mut row = vec![T::zero(); w];
    for ch in 0..c {
        for (y, t) in ty.iter().enumerate() {
            row.fill(T::zero());
            let grow = &grad_out[(ch * oh + y) * ow..][..ow];
            for (&g, s) in grow.iter().zip(&tx) {
                row[s.i0] += lit::<T>(s.w0) * g;
                row[s.i1] += lit::<T>(s.w1) * g;
            }
            let base = ch * h * w;
            let (w0, w1) = (lit::<T>(t.w0), lit::<T>(t.w1));
            for (x, &r) in row.iter().enumerate() {
                gin[base + t.i0 * w + x] += w0 * r;
                gin[base + t.i1 * w + x] += w1 * r;
            }
        }
    }
    gin
}
