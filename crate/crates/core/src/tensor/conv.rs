//! im2col + GEMM kernels for 2-D cross-correlation and its transpose.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_out_size(height, kernel, stride, pad),
            out_w: conv_out_size(width, kernel, stride, pad),
        }
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride + kernel - 2 * pad
}

/// Unfolds one image `[C, H, W]` into the `[C*k*k, out_h*out_w]` block of
/// `cols` whose rows are `ld` apart.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld..row * ld + ncol];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column block back into an image, accumulating.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T], ld: usize) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.pad as isize);
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld..row * ld + ncol];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Column-buffer budget in elements; small images are batched up to it.
const CHUNK_ELEMS: usize = 1 << 18;

fn chunk_len(batch: usize, rows: usize, ncol: usize) -> usize {
    (CHUNK_ELEMS / (rows * ncol).max(1)).clamp(1, batch.max(1))
}

/// Copies samples `[ch, ncol]` of `src` side by side into `[ch, n*ncol]`.
fn pack<T: Scalar>(src: &[T], first: usize, n: usize, ch: usize, ncol: usize, dst: &mut [T]) {
    let w = n * ncol;
    for i in 0..n {
        let sample = &src[(first + i) * ch * ncol..(first + i + 1) * ch * ncol];
        for c in 0..ch {
            dst[c * w + i * ncol..c * w + (i + 1) * ncol].copy_from_slice(&sample[c * ncol..(c + 1) * ncol]);
        }
    }
}

/// Inverse of [`pack`].
fn unpack<T: Scalar>(src: &[T], first: usize, n: usize, ch: usize, ncol: usize, dst: &mut [T]) {
    let w = n * ncol;
    for i in 0..n {
        let sample = &mut dst[(first + i) * ch * ncol..(first + i + 1) * ch * ncol];
        for c in 0..ch {
            sample[c * ncol..(c + 1) * ncol].copy_from_slice(&src[c * w + i * ncol..c * w + (i + 1) * ncol]);
        }
    }
}

/// `out[b] = K[O, C*k*k] * im2col(x[b])`.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], batch: usize, out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let in_sz = g.channels * g.height * g.width;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let chunk = chunk_len(batch, rows, ncol);
    let mut out = vec![T::zero(); batch * out_ch * ncol];
    let mut cols = vec![T::zero(); rows * ncol * chunk];
    let mut wide = vec![T::zero(); out_ch * ncol * chunk];
    for first in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - first);
        let w = n * ncol;
        for i in 0..n {
            let b = first + i;
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols[i * ncol..], w);
        }
        T::gemm(
            out_ch, rows, w, T::one(),
            kernel, rows as isize, 1,
            &cols, w as isize, 1,
            T::zero(),
            &mut wide, w as isize, 1,
        );
        unpack(&wide, first, n, out_ch, ncol, &mut out);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = g.channels * g.height * g.width;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let chunk = chunk_len(batch, rows, ncol);
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut dk = want_dk.then(|| vec![T::zero(); out_ch * rows]);
    let mut cols = vec![T::zero(); rows * ncol * chunk];
    let mut wide = vec![T::zero(); out_ch * ncol * chunk];
    for first in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - first);
        let w = n * ncol;
        pack(gout, first, n, out_ch, ncol, &mut wide);
        if let Some(dk) = dk.as_mut() {
            for i in 0..n {
                let b = first + i;
                im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols[i * ncol..], w);
            }
            // dK += gout * cols^T
            T::gemm(
                out_ch, w, rows, T::one(),
                &wide, w as isize, 1,
                &cols, 1, w as isize,
                T::one(),
                dk, rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T * gout
            T::gemm(
                rows, out_ch, w, T::one(),
                kernel, 1, rows as isize,
                &wide, w as isize, 1,
                T::zero(),
                &mut cols, w as isize, 1,
            );
            for i in 0..n {
                let b = first + i;
                col2im(&cols[i * ncol..], g, &mut dx[b * in_sz..(b + 1) * in_sz], w);
            }
        }
    }
    (dx, dk)
}

/// Transposed convolution. `g` describes the *adjoint* conv: its image is the
/// output `[O, out, out]` and its column grid matches the input `[C, H, W]`.
/// The kernel is laid out `[C, O*k*k]`.
pub(crate) fn conv_transpose_forward<T: Scalar>(x: &[T], kernel: &[T], batch: usize, in_ch: usize, g: &ConvGeom) -> Vec<T> {
    let out_sz = g.channels * g.height * g.width;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let chunk = chunk_len(batch, rows, ncol);
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = vec![T::zero(); rows * ncol * chunk];
    let mut wide = vec![T::zero(); in_ch * ncol * chunk];
    for first in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - first);
        let w = n * ncol;
        pack(x, first, n, in_ch, ncol, &mut wide);
        // cols = K^T[O*k*k, C] * x[C, n*HW]
        T::gemm(
            rows, in_ch, w, T::one(),
            kernel, 1, rows as isize,
            &wide, w as isize, 1,
            T::zero(),
            &mut cols, w as isize, 1,
        );
        for i in 0..n {
            let b = first + i;
            col2im(&cols[i * ncol..], g, &mut out[b * out_sz..(b + 1) * out_sz], w);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    batch: usize,
    in_ch: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = in_ch * g.col_cols();
    let out_sz = g.channels * g.height * g.width;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let chunk = chunk_len(batch, rows, ncol);
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut dk = want_dk.then(|| vec![T::zero(); in_ch * rows]);
    let mut cols = vec![T::zero(); rows * ncol * chunk];
    let mut wide = vec![T::zero(); in_ch * ncol * chunk];
    for first in (0..batch).step_by(chunk) {
        let n = chunk.min(batch - first);
        let w = n * ncol;
        for i in 0..n {
            let b = first + i;
            im2col(&gout[b * out_sz..(b + 1) * out_sz], g, &mut cols[i * ncol..], w);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                in_ch, rows, w, T::one(),
                kernel, rows as isize, 1,
                &cols, w as isize, 1,
                T::zero(),
                &mut wide, w as isize, 1,
            );
            unpack(&wide, first, n, in_ch, ncol, dx);
        }
        if let Some(dk) = dk.as_mut() {
            pack(x, first, n, in_ch, ncol, &mut wide);
            T::gemm(
                in_ch, w, rows, T::one(),
                &wide, w as isize, 1,
                &cols, 1, w as isize,
                T::one(),
                dk, rows as isize, 1,
            );
        }
    }
    (dx, dk)
}

