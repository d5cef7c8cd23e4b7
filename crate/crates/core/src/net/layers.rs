//! Layer implementations with explicit forward/backward passes.
//!
//! Forward passes consume their input tensor and stash whatever backward
//! needs inside a [`Cache`], so nothing is cloned on the hot path. Stride-1
//! convolutions run as a tap-major im2col plus axpy/dot gemm so the inner
//! loops stay long enough to vectorize on small feature maps. Gradient
//! correctness is pinned by the finite-difference harness in the test suite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{randn, LayerSpec};
use crate::tensor::{Scalar, Tensor};

/// `dst += c * src`, elementwise.
#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s.mul_add(c, *d);
    }
}

/// Fixed-order multi-accumulator dot product; the lane split keeps the
/// reduction vectorizable without reassociating arbitrarily.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..LANES {
            acc[i] = xa[i].mul_add(xb[i], acc[i]);
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s = x.mul_add(*y, s);
    }
    s
}

fn sum<T: Scalar>(v: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let mut c = v.chunks_exact(LANES);
    for x in c.by_ref() {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for x in c.remainder() {
        s = s + *x;
    }
    s
}

/// 2-D convolution with bias; weight shape `[out_ch, in_ch, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

/// Valid output range `lo..=hi` such that `o*stride + k_off - pad` stays
/// inside `0..in_size`, or None when the kernel tap never lands.
fn tap_range(
    in_size: usize,
    out_size: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> Option<(usize, usize)> {
    let s = stride as i64;
    let shift = k_off as i64 - pad as i64;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi_num = in_size as i64 - 1 - shift;
    if hi_num < 0 {
        return None;
    }
    let hi = (hi_num / s).min(out_size as i64 - 1);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// What a convolution keeps for its backward pass.
#[derive(Debug)]
pub enum ConvCache<T> {
    /// Stride-1 path: the tap-major im2col matrix `[in_ch*k*k, oh*ow]`.
    Cols { in_shape: [usize; 3], cols: Tensor<T> },
    /// General path: the raw input.
    Direct(Tensor<T>),
}

impl<T: Scalar> Conv2d<T> {
    fn init(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::from_vec(
            &[out_ch, in_ch, k, k],
            (0..out_ch * in_ch * k * k)
                .map(|_| T::from_f64(randn(rng) * std))
                .collect(),
        );
        Self {
            w,
            b: Tensor::zeros(&[out_ch]),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Tap-major im2col for stride 1: row `(ic*k + ky)*k + kx` holds the
    /// input shifted by that kernel tap, zeros where the tap leaves the
    /// image. Built with one contiguous copy per (tap, output row).
    fn im2col(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        let n = oh * ow;
        let taps = self.in_ch * self.k * self.k;
        let mut cols = Tensor::zeros(&[taps, n]);
        let cd = cols.data_mut();
        let xd = x.data();
        for ic in 0..self.in_ch {
            for ky in 0..self.k {
                let Some((oy0, oy1)) = tap_range(h, oh, ky, 1, self.pad) else {
                    continue;
                };
                for kx in 0..self.k {
                    let Some((ox0, ox1)) = tap_range(w, ow, kx, 1, self.pad) else {
                        continue;
                    };
                    let tap = (ic * self.k + ky) * self.k + kx;
                    let row_len = ox1 - ox0 + 1;
                    let xshift = kx as i64 - self.pad as i64;
                    let ix0 = (ox0 as i64 + xshift) as usize;
                    for oy in oy0..=oy1 {
                        let iy = oy + ky - self.pad;
                        let src = &xd[ic * h * w + iy * w + ix0..][..row_len];
                        let dst = &mut cd[tap * n + oy * ow + ox0..][..row_len];
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
        cols
    }

    fn forward_cols(&self, cols: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
        let n = oh * ow;
        let taps = self.in_ch * self.k * self.k;
        let mut out = Tensor::zeros(&[self.out_ch, oh, ow]);
        let od = out.data_mut();
        let wd = self.w.data();
        let cd = cols.data();
        for oc in 0..self.out_ch {
            let out_row = &mut od[oc * n..(oc + 1) * n];
            out_row.iter_mut().for_each(|v| *v = self.b.data()[oc]);
            for tap in 0..taps {
                axpy(out_row, &cd[tap * n..(tap + 1) * n], wd[oc * taps + tap]);
            }
        }
        out
    }

    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        if self.stride == 1 {
            let cols = self.im2col(x);
            let out = self.forward_cols(&cols, oh, ow);
            (
                out,
                ConvCache::Cols {
                    in_shape: [self.in_ch, h, w],
                    cols,
                },
            )
        } else {
            (self.forward_direct(x, oh, ow), ConvCache::Direct(x.clone()))
        }
    }

    fn forward_no_cache(&self, x: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        if self.stride == 1 {
            self.forward_cols(&self.im2col(x), oh, ow)
        } else {
            self.forward_direct(x, oh, ow)
        }
    }

    /// Reference direct convolution for general strides.
    fn forward_direct(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[self.out_ch, oh, ow]);
        let xd = x.data();
        let wd = self.w.data();
        let od = out.data_mut();
        for oc in 0..self.out_ch {
            let bias = self.b.data()[oc];
            od[oc * oh * ow..(oc + 1) * oh * ow]
                .iter_mut()
                .for_each(|v| *v = bias);
            for ic in 0..self.in_ch {
                for ky in 0..self.k {
                    let Some((oy0, oy1)) = tap_range(h, oh, ky, self.stride, self.pad) else {
                        continue;
                    };
                    for kx in 0..self.k {
                        let Some((ox0, ox1)) = tap_range(w, ow, kx, self.stride, self.pad) else {
                            continue;
                        };
                        let wv = wd[((oc * self.in_ch + ic) * self.k + ky) * self.k + kx];
                        let xshift = kx as i64 - self.pad as i64;
                        for oy in oy0..=oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let in_row = &xd[ic * h * w + iy * w..ic * h * w + (iy + 1) * w];
                            let out_row = &mut od[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                            for ox in ox0..=ox1 {
                                let ix = (ox * self.stride) as i64 + xshift;
                                out_row[ox] = in_row[ix as usize].mul_add(wv, out_row[ox]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns (dw, db, dx).
    fn backward(&self, cache: &ConvCache<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        match cache {
            ConvCache::Cols { in_shape, cols } => self.backward_cols(in_shape, cols, dout),
            ConvCache::Direct(x) => self.backward_direct(x, dout),
        }
    }

    fn backward_cols(
        &self,
        in_shape: &[usize; 3],
        cols: &Tensor<T>,
        dout: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let [_, h, w] = *in_shape;
        let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
        let n = oh * ow;
        let taps = self.in_ch * self.k * self.k;
        let dod = dout.data();
        let cd = cols.data();
        let wd = self.w.data();

        let mut dw = Tensor::zeros(self.w.shape());
        let mut db = Tensor::zeros(self.b.shape());
        {
            let dwd = dw.data_mut();
            let dbd = db.data_mut();
            for oc in 0..self.out_ch {
                let dout_row = &dod[oc * n..(oc + 1) * n];
                dbd[oc] = sum(dout_row);
                for tap in 0..taps {
                    dwd[oc * taps + tap] = dot(dout_row, &cd[tap * n..(tap + 1) * n]);
                }
            }
        }

        // dcols = W^T * dout, then fold the taps back onto the image
        let mut dcols = Tensor::zeros(&[taps, n]);
        {
            let gd = dcols.data_mut();
            for oc in 0..self.out_ch {
                let dout_row = &dod[oc * n..(oc + 1) * n];
                for tap in 0..taps {
                    axpy(&mut gd[tap * n..(tap + 1) * n], dout_row, wd[oc * taps + tap]);
                }
            }
        }
        let mut dx = Tensor::zeros(&[self.in_ch, h, w]);
        let dxd = dx.data_mut();
        let gd = dcols.data();
        for ic in 0..self.in_ch {
            for ky in 0..self.k {
                let Some((oy0, oy1)) = tap_range(h, oh, ky, 1, self.pad) else {
                    continue;
                };
                for kx in 0..self.k {
                    let Some((ox0, ox1)) = tap_range(w, ow, kx, 1, self.pad) else {
                        continue;
                    };
                    let tap = (ic * self.k + ky) * self.k + kx;
                    let row_len = ox1 - ox0 + 1;
                    let xshift = kx as i64 - self.pad as i64;
                    let ix0 = (ox0 as i64 + xshift) as usize;
                    for oy in oy0..=oy1 {
                        let iy = oy + ky - self.pad;
                        let src = &gd[tap * n + oy * ow + ox0..][..row_len];
                        let dst = &mut dxd[ic * h * w + iy * w + ix0..][..row_len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
        (dw, db, dx)
    }

    fn backward_direct(&self, x: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = (dout.shape()[1], dout.shape()[2]);
        let mut dw = Tensor::zeros(self.w.shape());
        let mut db = Tensor::zeros(self.b.shape());
        let mut dx = Tensor::zeros(x.shape());
        let xd = x.data();
        let dod = dout.data();
        let wd = self.w.data();
        {
            let dbd = db.data_mut();
            for oc in 0..self.out_ch {
                dbd[oc] = sum(&dod[oc * oh * ow..(oc + 1) * oh * ow]);
            }
        }
        let dwd = dw.data_mut();
        let dxd = dx.data_mut();
        for oc in 0..self.out_ch {
            for ic in 0..self.in_ch {
                for ky in 0..self.k {
                    let Some((oy0, oy1)) = tap_range(h, oh, ky, self.stride, self.pad) else {
                        continue;
                    };
                    for kx in 0..self.k {
                        let Some((ox0, ox1)) = tap_range(w, ow, kx, self.stride, self.pad) else {
                            continue;
                        };
                        let widx = ((oc * self.in_ch + ic) * self.k + ky) * self.k + kx;
                        let wv = wd[widx];
                        let xshift = kx as i64 - self.pad as i64;
                        let mut wacc = T::zero();
                        for oy in oy0..=oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let in_row = &xd[ic * h * w + iy * w..ic * h * w + (iy + 1) * w];
                            let dx_row = &mut dxd[ic * h * w + iy * w..ic * h * w + (iy + 1) * w];
                            let do_row = &dod[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                            for ox in ox0..=ox1 {
                                let ix = ((ox * self.stride) as i64 + xshift) as usize;
                                wacc = do_row[ox].mul_add(in_row[ix], wacc);
                                dx_row[ix] = do_row[ox].mul_add(wv, dx_row[ix]);
                            }
                        }
                        dwd[widx] = dwd[widx] + wacc;
                    }
                }
            }
        }
        (dw, db, dx)
    }
}

/// Fully connected head; weight shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Scalar> Dense<T> {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = Tensor::from_vec(
            &[out_dim, in_dim],
            (0..out_dim * in_dim)
                .map(|_| T::from_f64(randn(rng) * std))
                .collect(),
        );
        Self {
            w,
            b: Tensor::zeros(&[out_dim]),
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.len(), self.in_dim);
        let xd = x.data();
        let wd = self.w.data();
        let mut out = Tensor::zeros(&[self.out_dim]);
        let od = out.data_mut();
        for o in 0..self.out_dim {
            od[o] = self.b.data()[o] + dot(&wd[o * self.in_dim..(o + 1) * self.in_dim], xd);
        }
        out
    }

    fn backward(&self, x: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xd = x.data();
        let dod = dout.data();
        let mut dw = Tensor::zeros(self.w.shape());
        let mut dx = Tensor::zeros(&[self.in_dim]);
        {
            let dwd = dw.data_mut();
            let dxd = dx.data_mut();
            let wd = self.w.data();
            for o in 0..self.out_dim {
                let g = dod[o];
                axpy(&mut dwd[o * self.in_dim..(o + 1) * self.in_dim], xd, g);
                axpy(dxd, &wd[o * self.in_dim..(o + 1) * self.in_dim], g);
            }
        }
        let db = Tensor::from_vec(&[self.out_dim], dod.to_vec());
        (dw, db, dx.reshape(x.shape()))
    }
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Max pooling with argmax tracking (training path). Padding cells count as
/// -inf and are never selected.
fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0u32; c * oh * ow];
    let od = out.data_mut();
    if k == 2 && stride == 2 && pad == 0 {
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let top = &plane[2 * oy * w..2 * oy * w + w];
                let bot = &plane[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
                let orow = &mut od[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                let arow = &mut argmax[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = top[2 * ox];
                    let mut idx = base;
                    if top[2 * ox + 1] > best {
                        best = top[2 * ox + 1];
                        idx = base + 1;
                    }
                    if bot[2 * ox] > best {
                        best = bot[2 * ox];
                        idx = base + w;
                    }
                    if bot[2 * ox + 1] > best {
                        best = bot[2 * ox + 1];
                        idx = base + w + 1;
                    }
                    orow[ox] = best;
                    arow[ox] = idx as u32;
                }
            }
        }
        return (out, argmax);
    }
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        let idx = (ch * h + iy as usize) * w + ix as usize;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                od[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// Argmax-free max pooling (inference path).
fn maxpool_eval<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xd = x.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    if k == 2 && stride == 2 && pad == 0 {
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let top = &plane[2 * oy * w..2 * oy * w + w];
                let bot = &plane[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
                let orow = &mut od[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for ox in 0..ow {
                    let a = top[2 * ox].max(top[2 * ox + 1]);
                    let b = bot[2 * ox].max(bot[2 * ox + 1]);
                    orow[ox] = a.max(b);
                }
            }
        }
        return out;
    }
    if k == 3 && stride == 1 && pad == 1 && h >= 2 && w >= 4 {
        // row-wise horizontal max3 then vertical max3, borders clamped
        let mut hmax = vec![T::zero(); h * w];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                let dst = &mut hmax[y * w..(y + 1) * w];
                dst[0] = row[0].max(row[1]);
                for x_ in 1..w - 1 {
                    dst[x_] = row[x_ - 1].max(row[x_]).max(row[x_ + 1]);
                }
                dst[w - 1] = row[w - 2].max(row[w - 1]);
            }
            let oplane = &mut od[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let y0 = y.saturating_sub(1);
                let y1 = (y + 1).min(h - 1);
                let (r0, r1, r2) = (
                    &hmax[y0 * w..y0 * w + w],
                    &hmax[y * w..y * w + w],
                    &hmax[y1 * w..y1 * w + w],
                );
                let orow = &mut oplane[y * w..(y + 1) * w];
                for x_ in 0..w {
                    orow[x_] = r0[x_].max(r1[x_]).max(r2[x_]);
                }
            }
        }
        return out;
    }
    maxpool_forward(x, k, stride, pad).0
}

fn maxpool_backward<T: Scalar>(in_shape: &[usize], argmax: &[u32], dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (o, &idx) in argmax.iter().enumerate() {
        dxd[idx as usize] = dxd[idx as usize] + dout.data()[o];
    }
    dx
}

fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    out
}

fn relu_inplace<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    x
}

/// dX = dOut where the cached input was positive; the kink subgradient is 0.
fn relu_backward<T: Scalar>(input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = dout.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(input.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let c: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Inception-lite block: parallel 1x1 / 3x3 / 5x5 convs and a pooled 1x1,
/// each ReLU-activated, concatenated along channels.
#[derive(Debug, Clone)]
pub struct Inception<T> {
    pub c1: Conv2d<T>,
    pub c3: Conv2d<T>,
    pub c5: Conv2d<T>,
    pub cp: Conv2d<T>,
}

impl<T: Scalar> Inception<T> {
    fn init(in_ch: usize, b1: usize, b3: usize, b5: usize, bp: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::init(in_ch, b1, 1, 1, 0, rng),
            c3: Conv2d::init(in_ch, b3, 3, 1, 1, rng),
            c5: Conv2d::init(in_ch, b5, 5, 1, 2, rng),
            cp: Conv2d::init(in_ch, bp, 1, 1, 0, rng),
        }
    }
}

/// Runtime layer; mirrors [`LayerSpec`].
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool { k: usize, stride: usize },
    Inception(Inception<T>),
    GlobalAvgPool,
    Dropout { rate: f32 },
    Dense(Dense<T>),
}

/// Whatever a layer's backward pass needs from its forward pass.
#[derive(Debug)]
pub enum Cache<T> {
    Conv(ConvCache<T>),
    Relu { input: Tensor<T> },
    MaxPool { in_shape: Vec<usize>, argmax: Vec<u32> },
    Inception(Box<InceptionCache<T>>),
    Gap { in_shape: Vec<usize> },
    /// Scaled keep-mask; `None` when dropout was inactive.
    Dropout { mask: Option<Tensor<T>> },
    Dense { input: Tensor<T> },
}

#[derive(Debug)]
pub struct InceptionCache<T> {
    in_shape: Vec<usize>,
    c1: ConvCache<T>,
    c3: ConvCache<T>,
    c5: ConvCache<T>,
    cp: ConvCache<T>,
    pool_argmax: Vec<u32>,
    pre1: Tensor<T>,
    pre3: Tensor<T>,
    pre5: Tensor<T>,
    prep: Tensor<T>,
}

impl<T: Scalar> Cache<T> {
    /// Discrete forward decisions (ReLU signs, pool argmaxes). Two
    /// evaluations sharing a signature lie on the same smooth piece of the
    /// network, which is what central differences require.
    pub fn signature_into(&self, out: &mut Vec<u8>) {
        match self {
            Cache::Conv { .. } | Cache::Gap { .. } | Cache::Dense { .. } | Cache::Dropout { .. } => {}
            Cache::Relu { input } => {
                out.extend(input.data().iter().map(|&v| u8::from(v > T::zero())));
            }
            Cache::MaxPool { argmax, .. } => {
                for &a in argmax {
                    out.extend_from_slice(&a.to_le_bytes());
                }
            }
            Cache::Inception(ic) => {
                for t in [&ic.pre1, &ic.pre3, &ic.pre5, &ic.prep] {
                    out.extend(t.data().iter().map(|&v| u8::from(v > T::zero())));
                }
                for &a in &ic.pool_argmax {
                    out.extend_from_slice(&a.to_le_bytes());
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> {
    pub fn init(spec: &LayerSpec, in_shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => Layer::Conv(Conv2d::init(in_shape.0, out_channels, kernel, stride, pad, rng)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool { k: kernel, stride },
            LayerSpec::InceptionLite { b1, b3, b5, bpool } => {
                Layer::Inception(Inception::init(in_shape.0, b1, b3, b5, bpool, rng))
            }
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Dropout { rate } => Layer::Dropout { rate },
            LayerSpec::Dense { out } => {
                Layer::Dense(Dense::init(in_shape.0 * in_shape.1 * in_shape.2, out, rng))
            }
        }
    }

    pub fn out_shape(&self, s: (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            Layer::Conv(c) => {
                let (oh, ow) = c.out_hw(s.1, s.2);
                (c.out_ch, oh, ow)
            }
            Layer::Relu | Layer::Dropout { .. } => s,
            Layer::MaxPool { k, stride } => (s.0, (s.1 - k) / stride + 1, (s.2 - k) / stride + 1),
            Layer::Inception(b) => {
                (b.c1.out_ch + b.c3.out_ch + b.c5.out_ch + b.cp.out_ch, s.1, s.2)
            }
            Layer::GlobalAvgPool => (s.0, 1, 1),
            Layer::Dense(d) => (d.out_dim, 1, 1),
        }
    }

    pub fn forward_eval(&self, x: Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(c) => c.forward_no_cache(&x),
            Layer::Relu => relu_inplace(x),
            Layer::MaxPool { k, stride } => maxpool_eval(&x, *k, *stride, 0),
            Layer::Inception(b) => {
                let r1 = relu_inplace(b.c1.forward_no_cache(&x));
                let r3 = relu_inplace(b.c3.forward_no_cache(&x));
                let r5 = relu_inplace(b.c5.forward_no_cache(&x));
                let pooled = maxpool_eval(&x, 3, 1, 1);
                let rp = relu_inplace(b.cp.forward_no_cache(&pooled));
                concat_channels(&[&r1, &r3, &r5, &rp])
            }
            Layer::GlobalAvgPool => gap_forward(&x),
            // dropout at inference is exactly the identity
            Layer::Dropout { .. } => x,
            Layer::Dense(d) => d.forward(&x),
        }
    }

    pub fn forward_train(&self, x: Tensor<T>, rng: &mut ChaCha8Rng) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Conv(c) => {
                let (out, cache) = c.forward(&x);
                (out, Cache::Conv(cache))
            }
            Layer::Relu => {
                let out = relu_forward(&x);
                (out, Cache::Relu { input: x })
            }
            Layer::MaxPool { k, stride } => {
                let (out, argmax) = maxpool_forward(&x, *k, *stride, 0);
                (
                    out,
                    Cache::MaxPool {
                        in_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            Layer::Inception(b) => {
                let (pre1, c1) = b.c1.forward(&x);
                let (pre3, c3) = b.c3.forward(&x);
                let (pre5, c5) = b.c5.forward(&x);
                let (pooled, pool_argmax) = maxpool_forward(&x, 3, 1, 1);
                let (prep, cp) = b.cp.forward(&pooled);
                let out = concat_channels(&[
                    &relu_forward(&pre1),
                    &relu_forward(&pre3),
                    &relu_forward(&pre5),
                    &relu_forward(&prep),
                ]);
                (
                    out,
                    Cache::Inception(Box::new(InceptionCache {
                        in_shape: x.shape().to_vec(),
                        c1,
                        c3,
                        c5,
                        cp,
                        pool_argmax,
                        pre1,
                        pre3,
                        pre5,
                        prep,
                    })),
                )
            }
            Layer::GlobalAvgPool => {
                let out = gap_forward(&x);
                (
                    out,
                    Cache::Gap {
                        in_shape: x.shape().to_vec(),
                    },
                )
            }
            Layer::Dropout { rate } => {
                if *rate == 0.0 {
                    return (x, Cache::Dropout { mask: None });
                }
                let keep_scale = T::from_f64(1.0 / (1.0 - *rate as f64));
                let mut mask = Tensor::zeros(x.shape());
                for m in mask.data_mut() {
                    if rng.gen::<f64>() >= *rate as f64 {
                        *m = keep_scale;
                    }
                }
                let mut out = x;
                for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
                    *v = *v * m;
                }
                (out, Cache::Dropout { mask: Some(mask) })
            }
            Layer::Dense(d) => {
                let out = d.forward(&x);
                (out, Cache::Dense { input: x })
            }
        }
    }

    /// Returns (dx, parameter gradients in the layer's param order).
    pub fn backward(&self, cache: &Cache<T>, dout: Tensor<T>) -> (Tensor<T>, Vec<Tensor<T>>) {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv(cc)) => {
                let (dw, db, dx) = c.backward(cc, &dout);
                (dx, vec![dw, db])
            }
            (Layer::Relu, Cache::Relu { input }) => (relu_backward(input, &dout), Vec::new()),
            (Layer::MaxPool { .. }, Cache::MaxPool { in_shape, argmax }) => {
                (maxpool_backward(in_shape, argmax, &dout), Vec::new())
            }
            (Layer::Inception(b), Cache::Inception(ic)) => {
                let (n1, n3, n5) = (b.c1.out_ch, b.c3.out_ch, b.c5.out_ch);
                let (h, w) = (ic.in_shape[1], ic.in_shape[2]);
                let hw = h * w;
                let d = dout.data();
                let slice_part = |from: usize, ch: usize| {
                    Tensor::from_vec(&[ch, h, w], d[from * hw..(from + ch) * hw].to_vec())
                };
                let d1 = relu_backward(&ic.pre1, &slice_part(0, n1));
                let d3 = relu_backward(&ic.pre3, &slice_part(n1, n3));
                let d5 = relu_backward(&ic.pre5, &slice_part(n1 + n3, n5));
                let dp = relu_backward(&ic.prep, &slice_part(n1 + n3 + n5, b.cp.out_ch));
                let (dw1, db1, dx1) = b.c1.backward(&ic.c1, &d1);
                let (dw3, db3, dx3) = b.c3.backward(&ic.c3, &d3);
                let (dw5, db5, dx5) = b.c5.backward(&ic.c5, &d5);
                let (dwp, dbp, dpool) = b.cp.backward(&ic.cp, &dp);
                let mut dx = dx1;
                dx.add_assign(&dx3);
                dx.add_assign(&dx5);
                dx.add_assign(&maxpool_backward(&ic.in_shape, &ic.pool_argmax, &dpool));
                (dx, vec![dw1, db1, dw3, db3, dw5, db5, dwp, dbp])
            }
            (Layer::GlobalAvgPool, Cache::Gap { in_shape }) => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = Tensor::zeros(in_shape);
                let dxd = dx.data_mut();
                for ch in 0..c {
                    let g = dout.data()[ch] * inv;
                    dxd[ch * h * w..(ch + 1) * h * w]
                        .iter_mut()
                        .for_each(|v| *v = g);
                }
                (dx, Vec::new())
            }
            (Layer::Dropout { .. }, Cache::Dropout { mask }) => match mask {
                None => (dout, Vec::new()),
                Some(m) => {
                    let mut dx = dout;
                    for (g, &mv) in dx.data_mut().iter_mut().zip(m.data()) {
                        *g = *g * mv;
                    }
                    (dx, Vec::new())
                }
            },
            (Layer::Dense(dn), Cache::Dense { input }) => {
                let (dw, db, dx) = dn.backward(input, &dout);
                (dx, vec![dw, db])
            }
            _ => unreachable!("cache kind does not match layer kind"),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.w, &c.b],
            Layer::Inception(b) => vec![
                &b.c1.w, &b.c1.b, &b.c3.w, &b.c3.b, &b.c5.w, &b.c5.b, &b.cp.w, &b.cp.b,
            ],
            Layer::Dense(d) => vec![&d.w, &d.b],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.w, &mut c.b],
            Layer::Inception(b) => vec![
                &mut b.c1.w,
                &mut b.c1.b,
                &mut b.c3.w,
                &mut b.c3.b,
                &mut b.c5.w,
                &mut b.c5.b,
                &mut b.cp.w,
                &mut b.cp.b,
            ],
            Layer::Dense(d) => vec![&mut d.w, &mut d.b],
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Layer::Conv(_) => vec!["conv.w", "conv.b"],
            Layer::Inception(_) => vec![
                "b1x1.w", "b1x1.b", "b3x3.w", "b3x3.b", "b5x5.w", "b5x5.b", "bpool.w", "bpool.b",
            ],
            Layer::Dense(_) => vec!["fc.w", "fc.b"],
            _ => Vec::new(),
        }
    }
}

fn gap_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[c, 1, 1]);
    let od = out.data_mut();
    for ch in 0..c {
        od[ch] = sum(&x.data()[ch * h * w..(ch + 1) * h * w]) * inv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded::rng_for;

    /// Naive direct convolution, written independently of the layer code.
    fn conv_oracle(
        x: &[f64],
        (ic, h, w): (usize, usize, usize),
        wgt: &[f64],
        bias: &[f64],
        (oc, k, stride, pad): (usize, usize, usize, usize),
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; oc * oh * ow];
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for i in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as i64 * stride as i64 + ky as i64 - pad as i64;
                                let ix = ox as i64 * stride as i64 + kx as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += wgt[((o * ic + i) * k + ky) * k + kx]
                                    * x[(i * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive_oracle() {
        let mut rng = rng_for(42, &[0]);
        for &(ic, oc, k, stride, pad) in &[
            (1usize, 3usize, 3usize, 1usize, 1usize),
            (2, 4, 5, 1, 2),
            (3, 2, 3, 2, 0),
            (2, 3, 1, 1, 0),
        ] {
            let conv: Conv2d<f64> = Conv2d::init(ic, oc, k, stride, pad, &mut rng);
            let x = Tensor::from_vec(&[ic, 8, 8], (0..ic * 64).map(|_| randn(&mut rng)).collect());
            let got = conv.forward_no_cache(&x);
            let want = conv_oracle(
                x.data(),
                (ic, 8, 8),
                conv.w.data(),
                conv.b.data(),
                (oc, k, stride, pad),
            );
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_cached_forward_equals_eval_forward() {
        let mut rng = rng_for(43, &[0]);
        let conv: Conv2d<f32> = Conv2d::init(3, 5, 3, 1, 1, &mut rng);
        let x = Tensor::from_vec(
            &[3, 10, 10],
            (0..300).map(|_| randn(&mut rng) as f32).collect(),
        );
        let (a, _) = conv.forward(&x);
        let b = conv.forward_no_cache(&x);
        assert_eq!(a, b);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let x = Tensor::from_vec(
            &[1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 0.0, //
                3.0, 4.0, 1.0, 1.0, //
                0.0, 0.0, 9.0, 8.0, //
                0.0, 0.0, 7.0, 6.0,
            ],
        );
        let (out, argmax) = maxpool_forward(&x, 2, 2, 0);
        assert_eq!(out.data(), &[4.0, 5.0, 0.0, 9.0]);
        assert_eq!(argmax, vec![5, 2, 8, 10]);
        assert_eq!(maxpool_eval(&x, 2, 2, 0).data(), out.data());
    }

    #[test]
    fn pooled_eval_fast_path_matches_generic() {
        let mut rng = rng_for(44, &[0]);
        let x = Tensor::from_vec(
            &[3, 12, 12],
            (0..432).map(|_| randn(&mut rng) as f32).collect(),
        );
        let fast = maxpool_eval(&x, 3, 1, 1);
        let generic = maxpool_forward(&x, 3, 1, 1).0;
        assert_eq!(fast, generic);
        let fast = maxpool_eval(&x, 2, 2, 0);
        let generic = maxpool_forward(&x, 2, 2, 0).0;
        assert_eq!(fast, generic);
    }

    #[test]
    fn dropout_eval_is_exact_identity() {
        let layer: Layer<f32> = Layer::Dropout { rate: 0.9 };
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, -2.0, 3.0, 4.5]);
        let y = layer.forward_eval(x.clone());
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let layer: Layer<f64> = Layer::Dropout { rate: 0.5 };
        let x = Tensor::from_vec(&[1, 1, 8], vec![1.0; 8]);
        let (y, cache) = layer.forward_train(x, &mut rng_for(9, &[1]));
        let Cache::Dropout { mask: Some(mask) } = &cache else {
            panic!("expected an active mask");
        };
        for (&v, &m) in y.data().iter().zip(mask.data()) {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
            assert_eq!(v, m);
        }
    }

    #[test]
    fn gap_averages_each_channel() {
        let x = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let y = gap_forward(&x);
        assert_eq!(y.data(), &[2.5, 10.0]);
    }

    #[test]
    fn dot_matches_plain_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.25 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i * i) as f64 * 0.01).collect();
        let plain: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - plain).abs() < 1e-9);
    }
}
