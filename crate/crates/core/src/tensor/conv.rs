//! Convolution kernels. All tensors are `[N, C, H, W]` row-major.
//!
//! The forward pass lowers each image to a column matrix and runs the packed
//! matrix multiply. Its per-output accumulation order (input channel, kernel
//! row, kernel column) is the order of [`conv2d_reference`], so both produce
//! identical bits.

use super::gemm::{gemm, gemm_packed, panel_width, MatRef};
use super::{Float, Result, Tensor, TensorError};

/// Output extent along one axis. Strides must tile the padded extent.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::InvalidArgument("stride and kernel size must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("padded extent {padded} is smaller than kernel {kernel}"),
        });
    }
    // The padded extent must tile evenly into strides so that no trailing
    // input rows are silently skipped.
    if !padded.is_multiple_of(stride) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("padded extent {input} + 2*{padding} is not divisible by stride {stride}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = *input else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [N, C, H, W], got {input:?}"),
            });
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be [C_out, C_in, kH, kW], got {weight:?}"),
            });
        };
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {cin} channels, weight expects {wcin}"),
            });
        }
        let ho = conv_output_extent(h, kh, stride, pad)?;
        let wo = conv_output_extent(w, kw, stride, pad)?;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn in_plane(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output positions `o` with `0 <= o*stride + offset < extent`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, extent: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if extent as isize - offset <= 0 { 0 } else { (extent as isize - offset + s - 1) / s };
    let lo = (lo as usize).min(out);
    let hi = (hi as usize).min(out).max(lo);
    (lo, hi)
}

/// Lowers one image `[C, H, W]` into `[C*kH*kW, Ho*Wo]` columns whose rows are
/// `ld` apart. Positions that fall into the padding are left untouched.
fn im2col_into<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize) {
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy0, oy1) = valid_range(g.ho, g.stride, ki as isize - pad, g.h);
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * ld;
                let (ox0, ox1) = valid_range(g.wo, g.stride, kj as isize - pad, g.w);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let src = &plane[iy as usize * g.w..];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = (ox0 + kj) as isize - pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0 as usize..ix0 as usize + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: adds columns back into an image `[C, H, W]`.
fn col2im_from<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T], ld: usize) {
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy0, oy1) = valid_range(g.ho, g.stride, ki as isize - pad, g.h);
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * ld;
                let (ox0, ox1) = valid_range(g.wo, g.stride, kj as isize - pad, g.w);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in ox0..ox1 {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        dst[ix as usize] += src[ox];
                    }
                }
            }
        }
    }
}

/// Lowers one image `[C, H, W]` to `[C*kH*kW, Ho*Wo]`.
#[cfg(test)]
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    cols.clear();
    cols.resize(g.k() * g.out_pixels(), T::zero());
    im2col_into(x, g, cols, g.out_pixels());
}

#[cfg(test)]
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    col2im_from(cols, g, x, g.out_pixels());
}

/// Lowers the whole batch to `[C*kH*kW, N*Ho*Wo]`, image after image along
/// the columns, so one product covers every image.
fn im2col_batch<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    if g.is_pointwise() {
        return channel_major(x, g.n, g.cin, p);
    }
    let ld = g.n * p;
    let mut cols = vec![T::zero(); g.k() * ld];
    for n in 0..g.n {
        im2col_into(&x[n * g.in_plane()..(n + 1) * g.in_plane()], g, &mut cols[n * p..], ld);
    }
    cols
}

/// `[N, C, P]` to `[C, N*P]`.
fn channel_major<T: Float>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(ch * n + i) * p..(ch * n + i + 1) * p].copy_from_slice(&x[(i * c + ch) * p..(i * c + ch + 1) * p]);
        }
    }
    out
}

/// `[C, N*P]` to `[N, C, P]`.
fn batch_major<T: Float>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * p..(i * c + ch + 1) * p].copy_from_slice(&x[(ch * n + i) * p..(ch * n + i + 1) * p]);
        }
    }
    out
}

/// Lowers the whole batch to `[C*kH*kW, N*Ho*Wo]` written straight in the
/// panel layout of [`gemm_packed`], as the right-hand side of `W * cols`.
fn lower_cols<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let nr = panel_width::<T>();
    let (shift, lane_mask) = (nr.trailing_zeros(), nr - 1);
    let k = g.k();
    let p = g.out_pixels();
    let panel = nr * k;
    let mut out = vec![T::zero(); (g.n * p).div_ceil(nr) * panel];
    let pad = g.pad as isize;
    for n in 0..g.n {
        for ci in 0..g.cin {
            let plane = &x[(n * g.cin + ci) * g.h * g.w..(n * g.cin + ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let (oy0, oy1) = valid_range(g.ho, g.stride, ki as isize - pad, g.h);
                for kj in 0..g.kw {
                    let r = (ci * g.kh + ki) * g.kw + kj;
                    let (ox0, ox1) = valid_range(g.wo, g.stride, kj as isize - pad, g.w);
                    for oy in oy0..oy1 {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let j0 = n * p + oy * g.wo;
                        let ix = |ox: usize| ((ox * g.stride + kj) as isize - pad) as usize;
                        if g.stride == 1 {
                            // Runs of columns stay contiguous up to a panel edge.
                            let mut ox = ox0;
                            while ox < ox1 {
                                let j = j0 + ox;
                                let lane = j & lane_mask;
                                let run = (nr - lane).min(ox1 - ox);
                                let at = (j >> shift) * panel + r * nr + lane;
                                out[at..at + run].copy_from_slice(&src[ix(ox)..ix(ox) + run]);
                                ox += run;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let j = j0 + ox;
                                out[(j >> shift) * panel + r * nr + (j & lane_mask)] = src[ix(ox)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Lowers the whole batch to `[N*Ho*Wo, C*kH*kW]` in panel layout, as the
/// right-hand side of `dY * cols^T`. Filled pixel by pixel so the writes
/// stay sequential.
fn lower_rows<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let nr = panel_width::<T>();
    let (k, p) = (g.k(), g.out_pixels());
    let panel = nr * g.n * p;
    let mut out = vec![T::zero(); k.div_ceil(nr) * panel];
    // Per tap: channel plane offset and kernel position.
    let taps: Vec<(usize, usize, usize)> =
        (0..k).map(|r| (r / (g.kh * g.kw) * g.h * g.w, r / g.kw % g.kh, r % g.kw)).collect();
    let offsets: Vec<usize> = taps.iter().map(|&(plane, ki, kj)| plane + ki * g.w + kj).collect();
    let (h, w) = (g.h as isize, g.w as isize);
    for n in 0..g.n {
        let img = &x[n * g.in_plane()..(n + 1) * g.in_plane()];
        for oy in 0..g.ho {
            let by = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..g.wo {
                let bx = (ox * g.stride) as isize - g.pad as isize;
                let j = n * p + oy * g.wo + ox;
                let interior = by >= 0 && bx >= 0 && by + g.kh as isize <= h && bx + g.kw as isize <= w;
                for (q, chunk) in taps.chunks(nr).enumerate() {
                    let dst = &mut out[q * panel + j * nr..q * panel + j * nr + chunk.len()];
                    if interior {
                        let src = &img[by as usize * g.w + bx as usize..];
                        for (d, &o) in dst.iter_mut().zip(&offsets[q * nr..]) {
                            *d = src[o];
                        }
                    } else {
                        for (d, &(plane, ki, kj)) in dst.iter_mut().zip(chunk) {
                            let (iy, ix) = (by + ki as isize, bx + kj as isize);
                            if iy >= 0 && iy < h && ix >= 0 && ix < w {
                                *d = img[plane + iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], pixels: usize) {
    for (row, &b) in out.chunks_exact_mut(pixels).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

/// Window-summation convolution. Each output is
/// `(sum over ci, ki, kj of x * w, in that order) + bias`.
pub fn conv2d_reference<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    check_bias(bias, g.cout)?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(g.n * g.cout * g.out_pixels());
    for n in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ci in 0..g.cin {
                        for ki in 0..g.kh {
                            let iy = (oy * stride + ki) as isize - padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc + b[co]);
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub(crate) fn check_bias<T: Float>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias shape {:?}, expected [{channels}]", bias.shape()),
        });
    }
    Ok(())
}

/// Upper bound on the elements of one lowered column buffer. Larger batches
/// are lowered a few images at a time.
const LOWERED_BUDGET: usize = 1 << 19;

/// Splits the batch into runs of images whose lowered columns fit the budget.
/// Yields the first image of each run and the run's geometry.
fn image_groups(g: &ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> + '_ {
    let per = (LOWERED_BUDGET / (g.k() * g.out_pixels()).max(1)).clamp(1, g.n.max(1));
    (0..g.n).step_by(per).map(move |n0| (n0, ConvGeom { n: per.min(g.n - n0), ..*g }))
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut out = Vec::with_capacity(g.n * g.cout * p);
    for (n0, sub) in image_groups(g) {
        let np = sub.n * p;
        let cols = lower_cols(&x[n0 * g.in_plane()..(n0 + sub.n) * g.in_plane()], &sub);
        let mut y = vec![T::zero(); g.cout * np];
        gemm_packed(g.cout, np, g.k(), MatRef::row_major(w, g.k()), &cols, &mut y, false);
        let mut part = batch_major(&y, sub.n, g.cout, p);
        for out_n in part.chunks_exact_mut(g.cout * p) {
            add_bias(out_n, b, p);
        }
        out.extend_from_slice(&part);
    }
    out
}

/// Gradients of a convolution: (input, weight, bias), each computed only when requested.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let p = g.out_pixels();
    let k = g.k();
    let mut dx = need[0].then(|| Vec::with_capacity(g.n * g.in_plane()));
    let mut dw = need[1].then(|| vec![T::zero(); g.cout * k]);
    if need[0] || need[1] {
        for (n0, sub) in image_groups(g) {
            let np = sub.n * p;
            let dy_n = &dy[n0 * g.cout * p..(n0 + sub.n) * g.cout * p];
            let dy_cm = channel_major(dy_n, sub.n, g.cout, p);
            if let Some(dx) = dx.as_mut() {
                dx.extend_from_slice(&conv2d_backward_input(w, dy_n, &dy_cm, &sub));
            }
            if let Some(dw) = dw.as_mut() {
                let rows = lower_rows(&x[n0 * g.in_plane()..(n0 + sub.n) * g.in_plane()], &sub);
                gemm_packed(g.cout, k, np, MatRef::row_major(&dy_cm, np), &rows, dw, n0 > 0);
            }
        }
    }
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let row = &dy[(n * g.cout + co) * p..(n * g.cout + co + 1) * p];
                *acc += row.iter().fold(T::zero(), |s, &v| s + v);
            }
        }
        db
    });
    [dx, dw, db]
}

/// Input gradient for the images of `g`; `dy` is batch-major and `dy_cm` the
/// same values channel-major.
fn conv2d_backward_input<T: Float>(w: &[T], dy: &[T], dy_cm: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let np = g.n * p;
    let k = g.k();
    if g.stride == 1 && g.pad < g.kh && g.pad < g.kw {
        // A stride-1 convolution's input gradient is itself a convolution of
        // the output gradient with the spatially flipped, channel-swapped kernel.
        let mut flipped = vec![T::zero(); w.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        flipped[((ci * g.cout + co) * g.kh + (g.kh - 1 - ki)) * g.kw + (g.kw - 1 - kj)] =
                            w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    }
                }
            }
        }
        debug_assert_eq!(g.kh, g.kw);
        let back = ConvGeom {
            n: g.n,
            cin: g.cout,
            h: g.ho,
            w: g.wo,
            cout: g.cin,
            kh: g.kh,
            kw: g.kw,
            stride: 1,
            pad: g.kh - 1 - g.pad,
            ho: g.h,
            wo: g.w,
        };
        let zero_bias = vec![T::zero(); g.cin];
        return conv2d_forward(dy, &flipped, &zero_bias, &back);
    }
    let mut dcols = vec![T::zero(); k * np];
    gemm(k, np, g.cout, MatRef::transposed(w, k), MatRef::row_major(dy_cm, np), &mut dcols, false);
    let mut dx = vec![T::zero(); g.n * g.in_plane()];
    for n in 0..g.n {
        col2im_from(&dcols[n * p..], g, &mut dx[n * g.in_plane()..(n + 1) * g.in_plane()], np);
    }
    dx
}

/// Geometry of a transposed convolution with kernel `k`, stride `s` and no
/// padding, expressed as the forward convolution it is the adjoint of.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TransposedGeom {
    pub inner: ConvGeom,
}

impl TransposedGeom {
    /// `input` is `[N, C_in, H, W]`, `weight` is `[C_in, C_out, k, k]`.
    pub fn new(input: &[usize], weight: &[usize], stride: usize) -> Result<Self> {
        let [n, cin, h, w] = *input else {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input must be [N, C, H, W], got {input:?}"),
            });
        };
        let [wcin, cout, kh, kw] = *weight else {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("weight must be [C_in, C_out, kH, kW], got {weight:?}"),
            });
        };
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                detail: format!("input has {cin} channels, weight expects {wcin}"),
            });
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::InvalidArgument("stride and kernel size must be positive".into()));
        }
        let out_h = (h - 1) * stride + kh;
        let out_w = (w - 1) * stride + kw;
        // The adjoint convolution maps [C_out, out_h, out_w] back to [C_in, h, w].
        let inner = ConvGeom { n, cin: cout, h: out_h, w: out_w, cout: cin, kh, kw, stride, pad: 0, ho: h, wo: w };
        Ok(TransposedGeom { inner })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let g = &self.inner;
        [g.n, g.cin, g.h, g.w]
    }
}

pub(crate) fn conv_transpose2d_forward<T: Float>(x: &[T], w: &[T], b: &[T], tg: &TransposedGeom) -> Vec<T> {
    let g = &tg.inner;
    let p_in = g.out_pixels();
    let rows = g.k(); // C_out * k * k
    let out_plane = g.in_plane();
    let mut out = vec![T::zero(); g.n * out_plane];
    for (n0, sub) in image_groups(g) {
        let np = sub.n * p_in;
        let x_cm = channel_major(&x[n0 * g.cout * p_in..(n0 + sub.n) * g.cout * p_in], sub.n, g.cout, p_in);
        let mut cols = vec![T::zero(); rows * np];
        gemm(rows, np, g.cout, MatRef::transposed(w, rows), MatRef::row_major(&x_cm, np), &mut cols, false);
        for i in 0..sub.n {
            let out_n = &mut out[(n0 + i) * out_plane..(n0 + i + 1) * out_plane];
            col2im_from(&cols[i * p_in..], g, out_n, np);
            add_bias(out_n, b, g.h * g.w);
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    tg: &TransposedGeom,
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let g = &tg.inner;
    let p_in = g.out_pixels();
    let rows = g.k();
    let out_plane = g.in_plane();
    let cin = g.cout;
    let mut dx = need[0].then(|| Vec::with_capacity(g.n * cin * p_in));
    let mut dw = need[1].then(|| vec![T::zero(); cin * rows]);
    if need[0] || need[1] {
        for (n0, sub) in image_groups(g) {
            let np = sub.n * p_in;
            let cols = im2col_batch(&dy[n0 * out_plane..(n0 + sub.n) * out_plane], &sub);
            if let Some(dx) = dx.as_mut() {
                let mut dx_cm = vec![T::zero(); cin * np];
                gemm(cin, np, rows, MatRef::row_major(w, rows), MatRef::row_major(&cols, np), &mut dx_cm, false);
                dx.extend_from_slice(&batch_major(&dx_cm, sub.n, cin, p_in));
            }
            if let Some(dw) = dw.as_mut() {
                let x_cm = channel_major(&x[n0 * cin * p_in..(n0 + sub.n) * cin * p_in], sub.n, cin, p_in);
                gemm(cin, rows, np, MatRef::row_major(&x_cm, np), MatRef::transposed(&cols, np), dw, n0 > 0);
            }
        }
    }
    let db = need[2].then(|| {
        let plane = g.h * g.w;
        let mut db = vec![T::zero(); g.cin];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let row = &dy[n * out_plane + co * plane..n * out_plane + (co + 1) * plane];
                *acc += row.iter().fold(T::zero(), |s, &v| s + v);
            }
        }
        db
    });
    [dx, dw, db]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn output_extent_rules() {
        assert_eq!(conv_output_extent(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(conv_output_extent(3, 3, 1, 1).unwrap(), 3);
        assert!(conv_output_extent(5, 3, 2, 1).is_err());
        assert_eq!(conv_output_extent(4, 3, 2, 0).unwrap(), 1);
        assert!(conv_output_extent(2, 5, 1, 1).is_err());
        assert!(conv_output_extent(4, 3, 0, 1).is_err());
    }

    #[test]
    fn window_sum_of_ones_with_padding() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]).unwrap();
        let y = conv2d_reference(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    /// Fixed corpus of geometries; the lowered path must reproduce the window
    /// summation exactly.
    #[test]
    fn lowered_forward_is_bit_identical_to_window_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cases = [
            ([1, 1, 3, 3], [1, 1, 3, 3], 1, 1),
            ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
            ([2, 3, 8, 8], [5, 3, 3, 3], 2, 1),
            ([1, 4, 7, 9], [2, 4, 3, 3], 1, 0),
            ([3, 6, 6, 6], [7, 6, 1, 1], 1, 0),
            ([2, 6, 6, 6], [7, 6, 1, 1], 2, 0),
            ([1, 2, 10, 8], [3, 2, 5, 5], 2, 2),
            ([2, 40, 16, 16], [33, 40, 3, 3], 1, 1),
        ];
        for (xs, ws, stride, pad) in cases {
            let x = random(&xs, &mut rng);
            let w = random(&ws, &mut rng);
            let b = random(&[ws[0]], &mut rng);
            let slow = conv2d_reference(&x, &w, &b, stride, pad).unwrap();
            let g = ConvGeom::new(x.shape(), w.shape(), stride, pad).unwrap();
            let fast = conv2d_forward(x.data(), w.data(), b.data(), &g);
            assert_eq!(slow.shape(), &[g.n, g.cout, g.ho, g.wo]);
            assert!(
                slow.data().iter().zip(&fast).all(|(a, b)| a.to_bits() == b.to_bits()),
                "mismatch for {xs:?} {ws:?} s{stride} p{pad}"
            );
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeom::new(&[1, 2, 8, 6], &[1, 2, 3, 3], 2, 1).unwrap();
        let x = random(&[2 * 8 * 6], &mut rng);
        let c = random(&[g.k() * g.out_pixels()], &mut rng);
        let mut cols = Vec::new();
        im2col(x.data(), &g, &mut cols);
        let mut back = vec![0.0; x.numel()];
        col2im(c.data(), &g, &mut back);
        let lhs: f64 = cols.iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ConvGeom::new(&[1, 3, 8, 8], &[4, 2, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 8], &[4, 3, 3, 3], 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 8, 8], &[4, 3, 3, 3], 3, 1).is_err());
    }

    #[test]
    fn transposed_output_shape() {
        let tg = TransposedGeom::new(&[2, 8, 16, 16], &[8, 4, 2, 2], 2).unwrap();
        assert_eq!(tg.output_shape(), [2, 4, 32, 32]);
    }
}
