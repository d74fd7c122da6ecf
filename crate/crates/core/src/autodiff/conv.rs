//! im2col + GEMM convolution kernels shared by the graph's forward and backward rules.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_dim(size: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let (&[c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::ShapeIncompatible(input.to_vec(), kernel.to_vec()));
        };
        if kc != c {
            return Err(Error::ShapeIncompatible(input.to_vec(), kernel.to_vec()));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("stride and dilation must be positive".into()));
        }
        let out_h = out_dim(h, kh, stride, padding, dilation).ok_or(Error::KernelExceedsInput)?;
        let out_w = out_dim(w, kw, stride, padding, dilation).ok_or(Error::KernelExceedsInput)?;
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            dilation,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride-1, unpadded conv reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output coordinates `lo..hi` whose tap `k` lands inside an axis of length
    /// `size`, and the signed input offset of output 0 for that tap.
    fn tap_range(&self, k: usize, size: usize, out: usize) -> (usize, usize, isize) {
        let off = k * self.dilation;
        let s = self.stride;
        let lo = if off >= self.padding { 0 } else { (self.padding - off).div_ceil(s) };
        let limit = size + self.padding;
        let hi = if off >= limit { 0 } else { (limit - off).div_ceil(s) };
        let lo = lo.min(out);
        (lo, hi.min(out).max(lo), off as isize - self.padding as isize)
    }

    /// Calls `f(row, dst_start, src_start, len)` for every contiguous run of
    /// the column matrix, where `src_start` indexes the input plane with step
    /// `stride` and `dst_start` the column row with step 1.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let x_taps: Vec<_> = (0..self.kernel_w).map(|kx| self.tap_range(kx, self.width, self.out_w)).collect();
        for c in 0..self.in_channels {
            let plane = c * self.height * self.width;
            for ky in 0..self.kernel_h {
                let (ylo, yhi, yoff) = self.tap_range(ky, self.height, self.out_h);
                for (kx, &(xlo, xhi, xoff)) in x_taps.iter().enumerate() {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = (oy * self.stride) as isize + yoff;
                        let ix = (xlo * self.stride) as isize + xoff;
                        let src = plane + iy as usize * self.width + ix as usize;
                        f(row, oy * self.out_w + xlo, src, xhi - xlo);
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.pixels();
        let s = self.stride;
        let mut cols = vec![0.0; self.patch_len() * p];
        self.for_each_run(|row, dst, src, len| {
            let dst = &mut cols[row * p + dst..row * p + dst + len];
            if s == 1 {
                dst.copy_from_slice(&input[src..src + len]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = input[src + i * s];
                }
            }
        });
        cols
    }

    fn col2im_add(&self, cols: &[f64], grad_input: &mut [f64]) {
        let p = self.pixels();
        let s = self.stride;
        self.for_each_run(|row, dst, src, len| {
            let from = &cols[row * p + dst..row * p + dst + len];
            if s == 1 {
                for (g, v) in grad_input[src..src + len].iter_mut().zip(from) {
                    *g += v;
                }
            } else {
                for (i, v) in from.iter().enumerate() {
                    grad_input[src + i * s] += v;
                }
            }
        });
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, all row-major unless the
/// `*_t` flags request the transpose of a stored row-major matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted slice lengths cover every index reachable through
    // the given dimensions and strides.
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

pub fn forward(geo: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = geo.pixels();
    let mut out = vec![0.0; geo.out_channels * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[o]);
    }
    let owned;
    let cols: &[f64] = if geo.is_pointwise() {
        input
    } else {
        owned = geo.im2col(input);
        &owned
    };
    gemm(geo.out_channels, geo.patch_len(), p, kernel, false, cols, false, &mut out, 1.0);
    out
}

/// Accumulates gradients of a conv output into whichever of input, kernel and
/// bias buffers are requested.
pub fn backward(
    geo: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let p = geo.pixels();
    let k = geo.patch_len();
    if let Some(gb) = grad_bias {
        for (o, row) in grad_out.chunks(p).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(gk) = grad_kernel {
        let owned;
        let cols: &[f64] = if geo.is_pointwise() {
            input
        } else {
            owned = geo.im2col(input);
            &owned
        };
        gemm(geo.out_channels, p, k, grad_out, false, cols, true, gk, 1.0);
    }
    if let Some(gi) = grad_input {
        if geo.is_pointwise() {
            gemm(k, geo.out_channels, p, kernel, true, grad_out, false, gi, 1.0);
        } else {
            let mut dcols = vec![0.0; k * p];
            gemm(k, geo.out_channels, p, kernel, true, grad_out, false, &mut dcols, 0.0);
            geo.col2im_add(&dcols, gi);
        }
    }
}
