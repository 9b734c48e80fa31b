//! Inner loops shared by the convolution and affine ops.
//!
//! All products accumulate in `f64` and are narrowed once on store, so the
//! summation order is fixed and results are bitwise reproducible.

use super::Element;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let aik = aik.widen();
            let b_row = &b[kk * n..(kk + 1) * n];
            for (dst, &bv) in acc.iter_mut().zip(b_row) {
                *dst += aik * bv.widen();
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::narrow(v);
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`, as row-by-row dot products.
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = T::narrow(dot(a_row, &b[j * k..(j + 1) * k]));
        }
    }
}

const LANES: usize = 8;

/// Dot product with a fixed lane-wise summation order.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l].widen() * y[l].widen();
        }
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x.widen() * y.widen();
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out[n×m] = a[m×n]ᵀ`.
pub(crate) fn transpose<T: Element>(m: usize, n: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Spatial geometry of one cross-correlation: input `h×w`, kernel `kh×kw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the padded input is smaller than the kernel.
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source offset in the `channels×h×w` image for column entry
    /// `(c, ki, kj)` at output `(y, x)`, or `None` inside the padding.
    #[inline(always)]
    fn source(&self, c: usize, ki: usize, kj: usize, y: usize, x: usize) -> Option<usize> {
        let iy = (y * self.stride + ki).checked_sub(self.pad)?;
        let ix = (x * self.stride + kj).checked_sub(self.pad)?;
        if iy >= self.h || ix >= self.w {
            return None;
        }
        Some((c * self.h + iy) * self.w + ix)
    }
}

/// Unfolds one image into a `(C·kh·kw) × (oh·ow)` patch matrix.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for y in 0..g.oh {
                    for x in 0..g.ow {
                        dst[y * g.ow + x] = match g.source(c, ki, kj, y, x) {
                            Some(off) => image[off],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto an image,
/// summing overlapping contributions in `f64`.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let mut acc: Vec<f64> = image.iter().map(|v| v.widen()).collect();
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for y in 0..g.oh {
                    for x in 0..g.ow {
                        if let Some(off) = g.source(c, ki, kj, y, x) {
                            acc[off] += src[y * g.ow + x].widen();
                        }
                    }
                }
            }
        }
    }
    for (dst, v) in image.iter_mut().zip(acc) {
        *dst = T::narrow(v);
    }
}

pub(crate) fn add_assign<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
