//! im2col convolution kernels shared by the autodiff graph and plain inference paths.
//!
//! Layout is NCHW. A few samples at a time are folded into the GEMM column dimension.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}


/// Output positions `o` with `0 <= o*stride + k - pad < size`, as a half-open range.
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    for ci in 0..g.in_ch {
        for ky in 0..g.kernel {
            let (y0, y1) = valid_range(ky, g.pad, g.stride, g.in_h, oh);
            for kx in 0..g.kernel {
                let (x0, x1) = valid_range(kx, g.pad, g.stride, g.in_w, ow);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_ch + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[b * oh * ow..(b + 1) * oh * ow];
                    // only the padding positions need zeros; the rest is overwritten
                    dst[..y0 * ow].fill(T::zero());
                    dst[y1 * ow..].fill(T::zero());
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.in_w..][..g.in_w];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        d[..x0].fill(T::zero());
                        d[x1..].fill(T::zero());
                        let ix0 = x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            d[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (o, v) in d[x0..x1].iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adds the columns back onto the (pre-zeroed) image batch `x`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    for ci in 0..g.in_ch {
        for ky in 0..g.kernel {
            let (y0, y1) = valid_range(ky, g.pad, g.stride, g.in_h, oh);
            for kx in 0..g.kernel {
                let (x0, x1) = valid_range(kx, g.pad, g.stride, g.in_w, ow);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.in_ch + ci) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[b * oh * ow..(b + 1) * oh * ow];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst_row = &mut dst[iy * g.in_w..][..g.in_w];
                        let s = &src[oy * ow + x0..oy * ow + x1];
                        let ix0 = x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst_row[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                *d = *d + v;
                            }
                        } else {
                            for (d, &v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(s) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies `[nb, C, HW]` to `[C, nb*HW]`, or back when `to_batch_major`.
fn transpose_into<T: Scalar>(src: &[T], dst: &mut [T], nb: usize, ch: usize, hw: usize, to_batch_major: bool) {
    for b in 0..nb {
        for c in 0..ch {
            let bm = (b * ch + c) * hw;
            let cm = (c * nb + b) * hw;
            if to_batch_major {
                dst[bm..bm + hw].copy_from_slice(&src[cm..cm + hw]);
            } else {
                dst[cm..cm + hw].copy_from_slice(&src[bm..bm + hw]);
            }
        }
    }
}

/// Column matrices are built for a few samples at a time so that they stay cache resident.
const CHUNK_ELEMS: usize = 160 * 1024;

impl ConvGeom {
    fn chunk(&self) -> usize {
        let per_sample = self.patch() * self.out_h() * self.out_w();
        (CHUNK_ELEMS / per_sample.max(1)).clamp(1, self.batch.max(1))
    }

    fn with_batch(&self, batch: usize) -> ConvGeom {
        ConvGeom { batch, ..*self }
    }
}

/// Forward convolution. `w` is `[Cout, Cin, K, K]`, `bias` is `[Cout]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let in_len = g.in_ch * g.in_h * g.in_w;
    let out_len = g.out_ch * hw;
    let chunk = g.chunk();
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = vec![T::zero(); g.patch() * chunk * hw];
    let mut tmp = vec![T::zero(); if chunk > 1 { chunk * out_len } else { 0 }];
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let gc = g.with_batch(nb);
        let n = nb * hw;
        let cols = &mut cols[..g.patch() * n];
        im2col(&x[b0 * in_len..(b0 + nb) * in_len], &gc, cols);
        let dst = &mut out[b0 * out_len..(b0 + nb) * out_len];
        let target: &mut [T] = if nb == 1 { dst } else { &mut tmp[..nb * out_len] };
        if let Some(b) = bias {
            for (co, row) in target.chunks_mut(n).enumerate() {
                row.fill(b[co]);
            }
        }
        T::gemm(g.out_ch, g.patch(), n, T::one(), w, false, cols, false, beta, target);
        if nb > 1 {
            transpose_into(&tmp[..nb * out_len], &mut out[b0 * out_len..(b0 + nb) * out_len], nb, g.out_ch, hw, true);
        }
        b0 += nb;
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Backward convolution for the upstream gradient `gy` (`[B, Cout, Ho, Wo]`).
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let hw = g.out_h() * g.out_w();
    let in_len = g.in_ch * g.in_h * g.in_w;
    let out_len = g.out_ch * hw;
    let patch = g.patch();
    let chunk = g.chunk();
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_ch * patch]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for sample in gy.chunks(out_len) {
            for (d, row) in db.iter_mut().zip(sample.chunks(hw)) {
                *d = row.iter().fold(*d, |a, &v| a + v);
            }
        }
        db
    });
    if need_dx || need_dw {
        let mut cols = vec![T::zero(); if need_dw { patch * chunk * hw } else { 0 }];
        let mut dcols = vec![T::zero(); if need_dx { patch * chunk * hw } else { 0 }];
        let mut gy_t = vec![T::zero(); if chunk > 1 { chunk * out_len } else { 0 }];
        let mut b0 = 0;
        while b0 < g.batch {
            let nb = chunk.min(g.batch - b0);
            let gc = g.with_batch(nb);
            let n = nb * hw;
            let gy_c = &gy[b0 * out_len..(b0 + nb) * out_len];
            let gy_m: &[T] = if nb == 1 {
                gy_c
            } else {
                transpose_into(gy_c, &mut gy_t[..nb * out_len], nb, g.out_ch, hw, false);
                &gy_t[..nb * out_len]
            };
            if let Some(dw) = dw.as_mut() {
                let cols = &mut cols[..patch * n];
                im2col(&x[b0 * in_len..(b0 + nb) * in_len], &gc, cols);
                T::gemm(g.out_ch, n, patch, T::one(), gy_m, false, cols, true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut dcols[..patch * n];
                T::gemm(patch, g.out_ch, n, T::one(), w, true, gy_m, false, T::zero(), dcols);
                col2im(dcols, &gc, &mut dx[b0 * in_len..(b0 + nb) * in_len]);
            }
            b0 += nb;
        }
    }
    ConvGrads { dx, dw, db }
}
