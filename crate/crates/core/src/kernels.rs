//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! Loop orders are fixed, so results are bit-reproducible for a given input.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av == R::ZERO {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x n] += a^T * b` for `a[k x m]`, `b[k x n]`.
pub fn gemm_tn<R: Real>(a: &[R], b: &[R], out: &mut [R], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av == R::ZERO {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose<R: Real>(a: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output extent and leading zero padding for "same" convolution:
/// the output has `ceil(len / stride)` positions and any odd padding goes to
/// the trailing edge.
pub fn same_geometry(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, total / 2)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, cin: usize, kh: usize, kw: usize, cout: usize, stride: usize) -> Self {
        let (ho, pad_top) = same_geometry(h, kh, stride);
        let (wo, pad_left) = same_geometry(w, kw, stride);
        ConvGeometry {
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            stride,
            ho,
            wo,
            pad_top,
            pad_left,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// A 1x1 stride-1 convolution is a plain matrix product over pixels.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds an `(H, W, Cin)` map into `[Ho*Wo x Kh*Kw*Cin]` patches.
pub fn im2col<R: Real>(x: &[R], g: &ConvGeometry) -> Vec<R> {
    let plen = g.patch_len();
    let mut cols = vec![R::ZERO; g.ho * g.wo * plen];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * plen..][..plen];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, x0)) = g.source(oy, ky, ox, kx) {
                        let src = &x[(y * g.w + x0) * g.cin..][..g.cin];
                        row[(ky * g.kw + kx) * g.cin..][..g.cin].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the map.
pub fn col2im<R: Real>(dcols: &[R], g: &ConvGeometry) -> Vec<R> {
    let plen = g.patch_len();
    let mut dx = vec![R::ZERO; g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &dcols[(oy * g.wo + ox) * plen..][..plen];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, x0)) = g.source(oy, ky, ox, kx) {
                        let dst = &mut dx[(y * g.w + x0) * g.cin..][..g.cin];
                        let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward<R: Real>(x: &[R], w: &[R], g: &ConvGeometry) -> Vec<R> {
    let mut out = vec![R::ZERO; g.ho * g.wo * g.cout];
    if g.is_pointwise() {
        gemm_nn(x, w, &mut out, g.h * g.w, g.cin, g.cout);
    } else {
        let cols = im2col(x, g);
        gemm_nn(&cols, w, &mut out, g.ho * g.wo, g.patch_len(), g.cout);
    }
    out
}

/// Returns `(dx, dw)` for upstream gradient `dout`.
pub fn conv2d_backward<R: Real>(
    x: &[R],
    w: &[R],
    dout: &[R],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<R>>, Option<Vec<R>>) {
    let npix = g.ho * g.wo;
    let plen = g.patch_len();
    let cols_owned;
    let cols: &[R] = if g.is_pointwise() {
        x
    } else if need_dw {
        cols_owned = im2col(x, g);
        &cols_owned
    } else {
        &[]
    };
    let dw = need_dw.then(|| {
        let mut dw = vec![R::ZERO; plen * g.cout];
        gemm_tn(cols, dout, &mut dw, npix, plen, g.cout);
        dw
    });
    let dx = need_dx.then(|| {
        let wt = transpose(w, plen, g.cout);
        let mut dcols = vec![R::ZERO; npix * plen];
        gemm_nn(dout, &wt, &mut dcols, npix, g.cout, plen);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    (dx, dw)
}

pub fn upsample2x<R: Real>(x: &[R], h: usize, w: usize, c: usize) -> Vec<R> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![R::ZERO; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &x[((oy / 2) * w + ox / 2) * c..][..c];
            out[(oy * wo + ox) * c..][..c].copy_from_slice(src);
        }
    }
    out
}

pub fn upsample2x_backward<R: Real>(dout: &[R], h: usize, w: usize, c: usize) -> Vec<R> {
    let wo = 2 * w;
    let mut dx = vec![R::ZERO; h * w * c];
    for oy in 0..2 * h {
        for ox in 0..wo {
            let src = &dout[(oy * wo + ox) * c..][..c];
            let dst = &mut dx[((oy / 2) * w + ox / 2) * c..][..c];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    dx
}

pub fn softmax_rows<R: Real>(a: &[R], n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; a.len()];
    for (row, orow) in a.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(row[0], R::max);
        let mut total = R::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        let inv = R::ONE / total;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

/// Per-element binary cross-entropy with logits:
/// `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
pub fn bce_with_logits<R: Real>(x: R, y: R) -> R {
    x.max(R::ZERO) - x * y + (-x.abs()).exp().ln_1p()
}
