//! Raw loops behind the tape ops. Everything is row-major and accumulates
//! into the output buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        axpy_rows(a_row, b, out_row, n);
    }
}

/// `out[m×n] += aᵀ · b` with `a` stored as `[k×m]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut coeffs = vec![0.0; k];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        for (c, a_row) in coeffs.iter_mut().zip(a.chunks_exact(m)) {
            *c = a_row[i];
        }
        axpy_rows(&coeffs, b, out_row, n);
    }
}

/// `out += Σ_p coeffs[p] · b[p, :]`, four rows of `b` per pass so each
/// output element is loaded and stored once per four products.
#[inline]
fn axpy_rows(coeffs: &[f64], b: &[f64], out: &mut [f64], n: usize) {
    let mut quads = coeffs.chunks_exact(4).zip(b.chunks_exact(4 * n));
    for (s, rows) in &mut quads {
        if s.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (r0, rest) = rows.split_at(n);
        let (r1, rest) = rest.split_at(n);
        let (r2, r3) = rest.split_at(n);
        let (s0, s1, s2, s3) = (s[0], s[1], s[2], s[3]);
        for ((((o, &x0), &x1), &x2), &x3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            *o += s0 * x0 + s1 * x1 + s2 * x2 + s3 * x3;
        }
    }
    let done = coeffs.len() / 4 * 4;
    for (&s, row) in coeffs[done..].iter().zip(b[done * n..].chunks_exact(n)) {
        if s == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(row) {
            *o += s * v;
        }
    }
}

/// `[rows×cols]` → `[cols×rows]`.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if stride == 0 || padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::InvalidHyperparameter(alloc::format!(
                "dilation must be >= 1, got {dilation}"
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidHyperparameter(alloc::format!(
                "stride must be >= 1, got {stride}"
            )));
        }
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        };
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(mismatch());
        }
        let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, wc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc_in != c_in || kh != kw || kh % 2 == 0 {
            return Err(mismatch());
        }
        let out_height = conv_output_size(h, kh, stride, pad, dilation).ok_or_else(mismatch)?;
        let out_width = conv_output_size(w, kw, stride, pad, dilation).ok_or_else(mismatch)?;
        Ok(ConvGeometry {
            in_channels: c_in,
            out_channels: c_out,
            height: h,
            width: w,
            kernel: kh,
            stride,
            pad,
            dilation,
            out_height,
            out_width,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_cells(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source pixel for output cell `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
        let x = (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfold `x[C×H×W]` into `[C·k·k × H'·W']` patch columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let n = g.out_cells();
    let k = g.kernel;
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.out_width + ox] = plane[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto `[C×H×W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let n = g.out_cells();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + x] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]` plus an
/// optional per-output-channel bias. Returns the output and the patch columns.
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let n = g.out_cells();
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.out_channels * n];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(n).zip(b) {
            row.fill(bv);
        }
    }
    gemm(w, &cols, &mut out, g.out_channels, g.patch_len(), n);
    (out, cols)
}
