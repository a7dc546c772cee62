//! Raw numeric kernels on flat slices: GEMM and the im2col convolution machinery.

use crate::error::{config_err, Result};

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// A non-transposed operand is stored row-major with its logical shape; a
/// transposed one is stored row-major with the swapped shape.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D cross-correlation from an `h×w` grid to an `oh×ow` grid.
///
/// Only kernel taps that touch at least one in-bounds input pixel are kept in
/// `taps`; the rest contribute nothing and are skipped by im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
    pub taps: Vec<(usize, usize)>,
}

/// Output length of a strided, padded correlation along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel > len + 2 * pad {
        return None;
    }
    Some((len + 2 * pad - kernel) / stride + 1)
}

/// Output length of a transposed correlation along one axis.
pub fn conv_transpose_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    if stride == 0 || len == 0 || out_pad >= stride {
        return None;
    }
    let full = (len - 1) * stride + kernel + out_pad;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let oh = conv_out_len(h, kh, stride.0, pad.0).ok_or_else(|| {
            config_err!("kernel height {kh} does not fit input height {h} (pad {})", pad.0)
        })?;
        let ow = conv_out_len(w, kw, stride.1, pad.1).ok_or_else(|| {
            config_err!("kernel width {kw} does not fit input width {w} (pad {})", pad.1)
        })?;
        let live = |k: usize, out: usize, s: usize, p: usize, len: usize| {
            (0..out).any(|o| {
                let i = (o * s + k) as isize - p as isize;
                i >= 0 && (i as usize) < len
            })
        };
        let mut taps = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            if !live(ky, oh, stride.0, pad.0, h) {
                continue;
            }
            for kx in 0..kw {
                if live(kx, ow, stride.1, pad.1, w) {
                    taps.push((ky, kx));
                }
            }
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            taps,
        })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.taps.len()
    }

    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_positions()
    }

    /// Unfold `[n, c_in, h, w]` into a `[rows, n·oh·ow]` patch matrix.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.out_positions();
        let cols = self.cols();
        let nt = self.taps.len();
        let mut col = vec![0.0; self.rows() * cols];
        for c in 0..self.c_in {
            for (ti, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &mut col[(c * nt + ti) * cols..(c * nt + ti + 1) * cols];
                for n in 0..self.n {
                    let plane = &x[(n * self.c_in + c) * self.h * self.w..][..self.h * self.w];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        let dst = &mut row[n * p + oy * self.ow..][..self.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Fold a patch matrix back onto `[n, c_in, h, w]`, accumulating overlaps.
    pub fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let p = self.out_positions();
        let cols = self.cols();
        let nt = self.taps.len();
        for c in 0..self.c_in {
            for (ti, &(ky, kx)) in self.taps.iter().enumerate() {
                let row = &col[(c * nt + ti) * cols..(c * nt + ti + 1) * cols];
                for n in 0..self.n {
                    let plane =
                        &mut x[(n * self.c_in + c) * self.h * self.w..][..self.h * self.w];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        let src = &row[n * p + oy * self.ow..][..self.ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gather kernel `[c_out, c_in, kh, kw]` into a `[c_out, rows]` matrix over live taps.
    pub fn gather_kernel(&self, kernel: &[f64]) -> Vec<f64> {
        let rows = self.rows();
        let nt = self.taps.len();
        let mut out = vec![0.0; self.c_out * rows];
        for k in 0..self.c_out {
            for c in 0..self.c_in {
                let base = (k * self.c_in + c) * self.kh * self.kw;
                for (ti, &(ky, kx)) in self.taps.iter().enumerate() {
                    out[k * rows + c * nt + ti] = kernel[base + ky * self.kw + kx];
                }
            }
        }
        out
    }

    /// Inverse of [`gather_kernel`](Self::gather_kernel), accumulating into `kernel`.
    pub fn scatter_kernel(&self, mat: &[f64], kernel: &mut [f64]) {
        let rows = self.rows();
        let nt = self.taps.len();
        for k in 0..self.c_out {
            for c in 0..self.c_in {
                let base = (k * self.c_in + c) * self.kh * self.kw;
                for (ti, &(ky, kx)) in self.taps.iter().enumerate() {
                    kernel[base + ky * self.kw + kx] += mat[k * rows + c * nt + ti];
                }
            }
        }
    }
}

/// `[n, ch, p]` → `[ch, n·p]`.
pub fn batch_to_channel_major(x: &[f64], n: usize, ch: usize, p: usize) -> Vec<f64> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for c in 0..ch {
            out[c * n * p + b * p..][..p].copy_from_slice(&x[(b * ch + c) * p..][..p]);
        }
    }
    out
}

/// `[ch, n·p]` → `[n, ch, p]`.
pub fn channel_to_batch_major(x: &[f64], n: usize, ch: usize, p: usize) -> Vec<f64> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for c in 0..ch {
            out[(b * ch + c) * p..][..p].copy_from_slice(&x[c * n * p + b * p..][..p]);
        }
    }
    out
}
