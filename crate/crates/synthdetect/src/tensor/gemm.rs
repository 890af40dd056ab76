//! Deterministic matrix kernels behind conv/affine layers.
//!
//! Every output element accumulates its products in ascending-k order no
//! matter how the loops are chunked or threaded, so results are bitwise
//! stable under parallelism and, at `f64`, bit-identical to a naive
//! sequential triple loop. All kernels ADD into `out`; callers zero it
//! when overwrite semantics are wanted.

use rayon::prelude::*;

use super::Element;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// `out (m x n) += a (m x k) * b (k x n)`, all row-major.
pub fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += *aik * *bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// `out (m x n) += a (m x k) * b^T` where `b` is `n x k` row-major.
pub fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// `out (m x n) += a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * *bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// Floor formula for one convolution/pooling output axis.
pub fn conv_out_dim(input: usize, pad: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unrolls one `c x h x w` sample into a `(c*kh*kw) x (oh*ow)` matrix with
/// zero padding. Row index runs over `(c, ky, kx)` in row-major order, so
/// GEMM's ascending-k accumulation reproduces the naive `c, ky, kx` loop
/// nest exactly.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut Vec<T>,
) {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let cols = oh * ow;
    out.clear();
    out.resize(c * kh * kw * cols, T::ZERO);
    for cc in 0..c {
        let plane = &x[cc * h * w..(cc + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (cc * kh + ky) * kw + kx;
                let orow = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            orow[oy * ow + ox] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the `c x h x w` sample gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Element>(
    cols_grad: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x_grad: &mut [T],
) {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let cols = oh * ow;
    for cc in 0..c {
        let plane = &mut x_grad[cc * h * w..(cc + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (cc * kh + ky) * kw + kx;
                let grow = &cols_grad[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += grow[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
