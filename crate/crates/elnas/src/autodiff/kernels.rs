//! Dense numeric kernels behind the tape operations.
//!
//! Convolutions go through im2col plus GEMM, with a direct path for
//! depthwise filters. Everything is written against `ndarray` views so the
//! same code serves f32 and f64.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, ArrayViewMut3};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvMeta {
    pub fn simple(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvMeta { kernel, stride, padding, dilation: 1, groups: 1 }
    }

    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn output_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        let eff = self.effective_kernel();
        assert!(
            hw.0 + 2 * self.padding >= eff && hw.1 + 2 * self.padding >= eff,
            "input {}x{} too small for kernel {} (dilation {})",
            hw.0,
            hw.1,
            self.kernel,
            self.dilation
        );
        (
            (hw.0 + 2 * self.padding - eff) / self.stride + 1,
            (hw.1 + 2 * self.padding - eff) / self.stride + 1,
        )
    }
}

/// Multiply-accumulate count for one application of this convolution.
pub fn conv_macs(meta: &ConvMeta, c_in: usize, c_out: usize, in_hw: (usize, usize)) -> u64 {
    let (oh, ow) = meta.output_hw(in_hw);
    let per_output = meta.kernel * meta.kernel * (c_in / meta.groups);
    (c_out * oh * ow * per_output) as u64
}

/// Unpack one group of one sample into a `[c*k*k, oh*ow]` column matrix.
fn im2col<T: Scalar>(x: &ArrayView3<T>, meta: &ConvMeta, out_hw: (usize, usize), cols: &mut Array2<T>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ohn, own) = out_hw;
    let k = meta.kernel;
    let (s, d, p) = (meta.stride, meta.dilation, meta.padding);
    debug_assert_eq!(cols.shape(), &[c * k * k, ohn * own]);
    let mut row = 0;
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let plane = plane.as_slice().expect("contiguous input plane");
        for kh in 0..k {
            for kw in 0..k {
                let mut cols_row = cols.row_mut(row);
                let dst = cols_row.as_slice_mut().expect("contiguous cols row");
                for oh in 0..ohn {
                    let ih = (oh * s + kh * d) as isize - p as isize;
                    let seg = &mut dst[oh * own..(oh + 1) * own];
                    if ih < 0 || ih >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    if s == 1 {
                        // iw = ow + kw*d - p, contiguous in ow
                        let off = kw as isize * d as isize - p as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as isize - off).max(0) as usize).min(own);
                        seg[..lo.min(own)].fill(T::zero());
                        if lo < hi {
                            seg[lo..hi].copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        }
                        seg[hi.max(lo.min(own))..].fill(T::zero());
                    } else {
                        for (ow, slot) in seg.iter_mut().enumerate() {
                            let iw = (ow * s + kw * d) as isize - p as isize;
                            *slot = if iw >= 0 && iw < w as isize { src[iw as usize] } else { T::zero() };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of a column matrix back onto the input layout.
fn col2im_add<T: Scalar>(cols: &Array2<T>, meta: &ConvMeta, out_hw: (usize, usize), x: &mut ArrayViewMut3<T>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ohn, own) = out_hw;
    let k = meta.kernel;
    let (s, d, p) = (meta.stride, meta.dilation, meta.padding);
    let mut row = 0;
    for ci in 0..c {
        let mut plane = x.index_axis_mut(ndarray::Axis(0), ci);
        let plane = plane.as_slice_mut().expect("contiguous input plane");
        for kh in 0..k {
            for kw in 0..k {
                let cols_row = cols.row(row);
                let src = cols_row.as_slice().expect("contiguous cols row");
                for oh in 0..ohn {
                    let ih = (oh * s + kh * d) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let seg = &src[oh * own..(oh + 1) * own];
                    for (ow, &v) in seg.iter().enumerate() {
                        let iw = (ow * s + kw * d) as isize - p as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_depthwise(meta: &ConvMeta, c_in: usize, c_out: usize) -> bool {
    meta.groups == c_in && c_out == c_in && c_in > 1
}

pub fn conv2d_forward<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    bias: Option<&ArrayView1<T>>,
    meta: &ConvMeta,
) -> Array4<T> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cpg_in, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(k, meta.kernel);
    assert_eq!(c_in, cpg_in * meta.groups, "channel/group mismatch");
    assert_eq!(c_out % meta.groups, 0);
    let (oh, ow) = meta.output_hw((h, wd));
    let mut y = Array4::zeros((n, c_out, oh, ow));

    if is_depthwise(meta, c_in, c_out) {
        depthwise_forward(x, w, meta, &mut y);
    } else {
        let cpg_out = c_out / meta.groups;
        let mut cols = Array2::zeros((cpg_in * k * k, oh * ow));
        for ni in 0..n {
            for g in 0..meta.groups {
                let xg = x.slice(s![ni, g * cpg_in..(g + 1) * cpg_in, .., ..]);
                im2col(&xg, meta, (oh, ow), &mut cols);
                let wg = w
                    .slice(s![g * cpg_out..(g + 1) * cpg_out, .., .., ..])
                    .into_shape_with_order((cpg_out, cpg_in * k * k))
                    .expect("contiguous weight group");
                let mut yg = y
                    .slice_mut(s![ni, g * cpg_out..(g + 1) * cpg_out, .., ..])
                    .into_shape_with_order((cpg_out, oh * ow))
                    .expect("contiguous output group");
                general_mat_mul(T::one(), &wg, &cols, T::zero(), &mut yg);
            }
        }
    }

    if let Some(b) = bias {
        for ni in 0..n {
            for ci in 0..c_out {
                y.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v + b[ci]);
            }
        }
    }
    y
}

fn depthwise_forward<T: Scalar>(x: &ArrayView4<T>, w: &ArrayView4<T>, meta: &ConvMeta, y: &mut Array4<T>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ohn, own) = (y.shape()[2], y.shape()[3]);
    let k = meta.kernel;
    let (s, d, p) = (meta.stride, meta.dilation, meta.padding);
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.slice(s![ni, ci, .., ..]);
            let xp = xp.as_slice().expect("contiguous plane");
            let mut yp = y.slice_mut(s![ni, ci, .., ..]);
            let yp = yp.as_slice_mut().expect("contiguous plane");
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[[ci, 0, kh, kw]];
                    for oh in 0..ohn {
                        let ih = (oh * s + kh * d) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = &xp[ih as usize * wd..(ih as usize + 1) * wd];
                        let dst = &mut yp[oh * own..(oh + 1) * own];
                        if s == 1 {
                            let off = kw as isize * d as isize - p as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = ((wd as isize - off).max(0) as usize).min(own);
                            for ow in lo..hi {
                                dst[ow] += wv * src[(ow as isize + off) as usize];
                            }
                        } else {
                            for (ow, slot) in dst.iter_mut().enumerate() {
                                let iw = (ow * s + kw * d) as isize - p as isize;
                                if iw >= 0 && iw < wd as isize {
                                    *slot += wv * src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvGrads<T: Scalar> {
    pub dx: Array4<T>,
    pub dw: Array4<T>,
    pub db: Option<Array1<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    has_bias: bool,
    meta: &ConvMeta,
    gy: &ArrayView4<T>,
) -> ConvGrads<T> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, cpg_in, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let mut dx = Array4::zeros((n, c_in, h, wd));
    let mut dw = Array4::zeros(w.raw_dim());

    if is_depthwise(meta, c_in, c_out) {
        depthwise_backward(x, w, meta, gy, &mut dx, &mut dw);
    } else {
        let cpg_out = c_out / meta.groups;
        let mut cols = Array2::zeros((cpg_in * k * k, oh * ow));
        let mut dcols = Array2::zeros((cpg_in * k * k, oh * ow));
        for ni in 0..n {
            for g in 0..meta.groups {
                let xg = x.slice(s![ni, g * cpg_in..(g + 1) * cpg_in, .., ..]);
                im2col(&xg, meta, (oh, ow), &mut cols);
                let wg = w
                    .slice(s![g * cpg_out..(g + 1) * cpg_out, .., .., ..])
                    .into_shape_with_order((cpg_out, cpg_in * k * k))
                    .expect("contiguous weight group");
                let gyg = gy
                    .slice(s![ni, g * cpg_out..(g + 1) * cpg_out, .., ..])
                    .into_shape_with_order((cpg_out, oh * ow))
                    .expect("contiguous grad group");
                // dW += gY · colsᵀ
                {
                    let mut dwg = dw
                        .slice_mut(s![g * cpg_out..(g + 1) * cpg_out, .., .., ..])
                        .into_shape_with_order((cpg_out, cpg_in * k * k))
                        .expect("contiguous dW group");
                    general_mat_mul(T::one(), &gyg, &cols.t(), T::one(), &mut dwg);
                }
                // dX += col2im(Wᵀ · gY)
                general_mat_mul(T::one(), &wg.t(), &gyg, T::zero(), &mut dcols);
                let mut dxg = dx.slice_mut(s![ni, g * cpg_in..(g + 1) * cpg_in, .., ..]);
                col2im_add(&dcols, meta, (oh, ow), &mut dxg);
            }
        }
    }

    let db = has_bias.then(|| {
        let mut db = Array1::zeros(c_out);
        for ni in 0..n {
            for ci in 0..c_out {
                db[ci] += gy.slice(s![ni, ci, .., ..]).iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

fn depthwise_backward<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    meta: &ConvMeta,
    gy: &ArrayView4<T>,
    dx: &mut Array4<T>,
    dw: &mut Array4<T>,
) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ohn, own) = (gy.shape()[2], gy.shape()[3]);
    let k = meta.kernel;
    let (s, d, p) = (meta.stride, meta.dilation, meta.padding);
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.slice(s![ni, ci, .., ..]);
            let xp = xp.as_slice().expect("contiguous plane");
            let gp = gy.slice(s![ni, ci, .., ..]);
            let gp = gp.as_slice().expect("contiguous plane");
            let mut dxp = dx.slice_mut(s![ni, ci, .., ..]);
            let dxp = dxp.as_slice_mut().expect("contiguous plane");
            for kh in 0..k {
                for kw in 0..k {
                    let wv = w[[ci, 0, kh, kw]];
                    let mut wacc = T::zero();
                    for oh in 0..ohn {
                        let ih = (oh * s + kh * d) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let grow = &gp[oh * own..(oh + 1) * own];
                        let xrow = &xp[ih as usize * wd..(ih as usize + 1) * wd];
                        let dxrow = &mut dxp[ih as usize * wd..(ih as usize + 1) * wd];
                        for (ow, &gv) in grow.iter().enumerate() {
                            let iw = (ow * s + kw * d) as isize - p as isize;
                            if iw >= 0 && iw < wd as isize {
                                dxrow[iw as usize] += wv * gv;
                                wacc += xrow[iw as usize] * gv;
                            }
                        }
                    }
                    dw[[ci, 0, kh, kw]] += wacc;
                }
            }
        }
    }
}

pub fn max_pool_forward<T: Scalar>(
    x: &ArrayView4<T>,
    k: usize,
    s: usize,
    p: usize,
) -> (Array4<T>, Vec<u32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let meta = ConvMeta::simple(k, s, p);
    let (oh, ow) = meta.output_hw((h, w));
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.slice(s![ni, ci, .., ..]);
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for kh in 0..k {
                        let ih = (ohi * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (owi * s + kw) as isize - p as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let v = xp[[ih as usize, iw as usize]];
                            if v > best {
                                best = v;
                                best_idx = (ih as usize * w + iw as usize) as u32;
                            }
                        }
                    }
                    y[[ni, ci, ohi, owi]] = best;
                    argmax[flat] = best_idx;
                    flat += 1;
                }
            }
        }
    }
    (y, argmax)
}

pub fn max_pool_backward<T: Scalar>(
    in_shape: (usize, usize, usize, usize),
    argmax: &[u32],
    gy: &ArrayView4<T>,
) -> Array4<T> {
    let (n, c, h, w) = in_shape;
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let mut dx = Array4::zeros((n, c, h, w));
    let mut flat = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let mut dxp = dx.slice_mut(s![ni, ci, .., ..]);
            let dxp = dxp.as_slice_mut().expect("contiguous plane");
            for ohi in 0..oh {
                for owi in 0..ow {
                    dxp[argmax[flat] as usize] += gy[[ni, ci, ohi, owi]];
                    flat += 1;
                }
            }
        }
    }
    dx
}

/// Average pooling over the valid (unpadded) window positions.
pub fn avg_pool_forward<T: Scalar>(x: &ArrayView4<T>, k: usize, s: usize, p: usize) -> Array4<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let meta = ConvMeta::simple(k, s, p);
    let (oh, ow) = meta.output_hw((h, w));
    let mut y = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.slice(s![ni, ci, .., ..]);
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = T::zero();
                    let mut cnt = 0usize;
                    for kh in 0..k {
                        let ih = (ohi * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (owi * s + kw) as isize - p as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += xp[[ih as usize, iw as usize]];
                            cnt += 1;
                        }
                    }
                    y[[ni, ci, ohi, owi]] = acc / T::from_usize(cnt.max(1));
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward<T: Scalar>(
    in_shape: (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    gy: &ArrayView4<T>,
) -> Array4<T> {
    let (n, c, h, w) = in_shape;
    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut cnt = 0usize;
                    for kh in 0..k {
                        let ih = (ohi * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (owi * s + kw) as isize - p as isize;
                            if iw >= 0 && iw < w as isize {
                                cnt += 1;
                            }
                        }
                    }
                    let share = gy[[ni, ci, ohi, owi]] / T::from_usize(cnt.max(1));
                    for kh in 0..k {
                        let ih = (ohi * s + kh) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (owi * s + kw) as isize - p as isize;
                            if iw >= 0 && iw < w as isize {
                                dx[[ni, ci, ih as usize, iw as usize]] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Region bounds used by adaptive average pooling.
pub fn adaptive_region(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = out_idx * in_len / out_len;
    let hi = ((out_idx + 1) * in_len).div_ceil(out_len);
    (lo, hi)
}

pub fn adaptive_avg_pool_forward<T: Scalar>(x: &ArrayView4<T>, out_hw: (usize, usize)) -> Array4<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = out_hw;
    assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "adaptive pool cannot upsample {h}x{w} to {oh}x{ow}");
    let mut y = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.slice(s![ni, ci, .., ..]);
            for ohi in 0..oh {
                let (h0, h1) = adaptive_region(ohi, h, oh);
                for owi in 0..ow {
                    let (w0, w1) = adaptive_region(owi, w, ow);
                    let mut acc = T::zero();
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            acc += xp[[ih, iw]];
                        }
                    }
                    y[[ni, ci, ohi, owi]] = acc / T::from_usize((h1 - h0) * (w1 - w0));
                }
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    gy: &ArrayView4<T>,
) -> Array4<T> {
    let (n, c, h, w) = in_shape;
    let (oh, ow) = out_hw;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for ohi in 0..oh {
                let (h0, h1) = adaptive_region(ohi, h, oh);
                for owi in 0..ow {
                    let (w0, w1) = adaptive_region(owi, w, ow);
                    let share = gy[[ni, ci, ohi, owi]] / T::from_usize((h1 - h0) * (w1 - w0));
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            dx[[ni, ci, ih, iw]] += share;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub struct BnForward<T: Scalar> {
    pub y: Array4<T>,
    pub mean: Array1<T>,
    pub var: Array1<T>,
    pub inv_std: Array1<T>,
}

/// Batch normalization over (N, H, W) per channel with batch statistics.
pub fn bn_forward_train<T: Scalar>(
    x: &ArrayView4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    eps: T,
) -> BnForward<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = T::from_usize(n * h * w);
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            acc += x.slice(s![ni, ci, .., ..]).iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut vacc = T::zero();
        for ni in 0..n {
            for &v in x.slice(s![ni, ci, .., ..]).iter() {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = vacc / m;
    }
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut y = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let xp = x.slice(s![ni, ci, .., ..]);
            let mut yp = y.slice_mut(s![ni, ci, .., ..]);
            ndarray::Zip::from(&mut yp).and(&xp).for_each(|o, &v| *o = (v - mu) * is * g + b);
        }
    }
    BnForward { y, mean, var, inv_std }
}

pub fn bn_forward_eval<T: Scalar>(
    x: &ArrayView4<T>,
    gamma: &ArrayView1<T>,
    beta: &ArrayView1<T>,
    mean: &ArrayView1<T>,
    var: &ArrayView1<T>,
    eps: T,
) -> (Array4<T>, Array1<T>) {
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut y = Array4::zeros(x.raw_dim());
    let (n, c) = (x.shape()[0], x.shape()[1]);
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let xp = x.slice(s![ni, ci, .., ..]);
            let mut yp = y.slice_mut(s![ni, ci, .., ..]);
            ndarray::Zip::from(&mut yp).and(&xp).for_each(|o, &v| *o = (v - mu) * is * g + b);
        }
    }
    (y, inv_std)
}

pub struct BnGrads<T: Scalar> {
    pub dx: Array4<T>,
    pub dgamma: Array1<T>,
    pub dbeta: Array1<T>,
}

pub fn bn_backward<T: Scalar>(
    x: &ArrayView4<T>,
    mean: &ArrayView1<T>,
    inv_std: &ArrayView1<T>,
    gamma: &ArrayView1<T>,
    batch_stats: bool,
    gy: &ArrayView4<T>,
) -> BnGrads<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let m = T::from_usize(n * h * w);
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    let mut dx = Array4::zeros((n, c, h, w));
    for ci in 0..c {
        let (mu, is) = (mean[ci], inv_std[ci]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..n {
            let xp = x.slice(s![ni, ci, .., ..]);
            let gp = gy.slice(s![ni, ci, .., ..]);
            ndarray::Zip::from(&xp).and(&gp).for_each(|&xv, &gv| {
                sum_g += gv;
                sum_gx += gv * (xv - mu) * is;
            });
        }
        dbeta[ci] = sum_g;
        dgamma[ci] = sum_gx;
        let gsc = gamma[ci] * is;
        if batch_stats {
            let mg = sum_g / m;
            let mgx = sum_gx / m;
            for ni in 0..n {
                let xp = x.slice(s![ni, ci, .., ..]);
                let gp = gy.slice(s![ni, ci, .., ..]);
                let mut dp = dx.slice_mut(s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut dp).and(&xp).and(&gp).for_each(|o, &xv, &gv| {
                    let xhat = (xv - mu) * is;
                    *o = gsc * (gv - mg - xhat * mgx);
                });
            }
        } else {
            for ni in 0..n {
                let gp = gy.slice(s![ni, ci, .., ..]);
                let mut dp = dx.slice_mut(s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut dp).and(&gp).for_each(|o, &gv| *o = gsc * gv);
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().sum::<T>();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Row-wise log-sum-exp.
pub fn logsumexp_rows<T: Scalar>(x: &Array2<T>) -> Array1<T> {
    let mut out = Array1::zeros(x.shape()[0]);
    for (i, row) in x.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().map(|&v| (v - max).exp()).sum::<T>();
        out[i] = max + sum.ln();
    }
    out
}
