//! Roto-translation equivariant layers on SE(2,N) feature maps.
//!
//! An SE(2,N) feature map is a tensor of shape `[B, M, N, H, W]`: `M`
//! channels, each sampled at `N` discrete orientations. Rotating the input
//! image by a quarter turn rotates every spatial slice and cyclically shifts
//! the orientation axis by `N/4`; all layers here commute with that action.
//!
//! Group convolutions are computed by expanding the learnable kernels into
//! an ordinary convolution kernel over the flattened `(channel, orientation)`
//! axis with a precomputed sparse linear map, then running one [`Tape::conv2d`].

mod rotation;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{rot90_index, BnMode, BnStats, RunningStats, Scalar, SparseMap, Tape, Tensor, Var};

pub use rotation::{RotatedKernelBank, RotationTable, Tap};

/// Reduction applied by [`orientation_project`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Mean,
    Max,
}

/// Expands lifting kernels `[M, C, k, k]` into `[M·N, C, k, k]`, where slot
/// `(m, j)` holds kernel `m` rotated by orientation `j`.
#[derive(Clone, Debug)]
pub struct LiftingKernel<T> {
    map: Arc<SparseMap<T>>,
    out_channels: usize,
    in_channels: usize,
    orientations: usize,
    size: usize,
}

impl<T: Scalar> LiftingKernel<T> {
    pub fn new(table: &RotationTable, out_channels: usize, in_channels: usize) -> Result<Self> {
        let (n, k) = (table.orientations(), table.size());
        let kk = k * k;
        let mut entries = Vec::new();
        for j in 0..n {
            for c in 0..in_channels {
                for t in table.taps(j)? {
                    entries.push(((j * in_channels + c) * kk + t.target, c * kk + t.source, T::of(t.weight)));
                }
            }
        }
        let map = SparseMap {
            out_len: n * in_channels * kk,
            in_len: in_channels * kk,
            entries,
        };
        Ok(Self {
            map: Arc::new(map),
            out_channels,
            in_channels,
            orientations: n,
            size: k,
        })
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.size, self.size]
    }

    pub fn expand(&self, tape: &mut Tape<T>, kernel: Var) -> Result<Var> {
        expect_shape(tape, kernel, &self.kernel_shape(), "lifting kernel")?;
        let (n, c, k) = (self.orientations, self.in_channels, self.size);
        let e = tape.sparse_linear(kernel, self.map.clone(), &[n, c, k, k])?;
        tape.reshape(e, &[self.out_channels * n, c, k, k])
    }
}

/// Expands group kernels `[A, B, N, k, k]` into `[A·N, B·N, k, k]` with
/// entry `[(a, α), (b, β)] = rotate(K[a, b, (β − α) mod N], α)`.
///
/// Read as a conv2d kernel (`A` = output channels) this is the SE(2,N) group
/// correlation; read as a transposed-conv kernel (`A` = input channels) it is
/// the equivariant transposed group convolution.
#[derive(Clone, Debug)]
pub struct GroupKernel<T> {
    map: Arc<SparseMap<T>>,
    outer: usize,
    inner: usize,
    orientations: usize,
    size: usize,
}

impl<T: Scalar> GroupKernel<T> {
    pub fn new(table: &RotationTable, outer: usize, inner: usize) -> Result<Self> {
        let (n, k) = (table.orientations(), table.size());
        let kk = k * k;
        let mut entries = Vec::new();
        for alpha in 0..n {
            let taps = table.taps(alpha)?;
            for b in 0..inner {
                for beta in 0..n {
                    let rel = (beta + n - alpha) % n;
                    for t in taps {
                        entries.push((
                            ((alpha * inner + b) * n + beta) * kk + t.target,
                            (b * n + rel) * kk + t.source,
                            T::of(t.weight),
                        ));
                    }
                }
            }
        }
        let map = SparseMap {
            out_len: n * inner * n * kk,
            in_len: inner * n * kk,
            entries,
        };
        Ok(Self {
            map: Arc::new(map),
            outer,
            inner,
            orientations: n,
            size: k,
        })
    }

    pub fn kernel_shape(&self) -> [usize; 5] {
        [self.outer, self.inner, self.orientations, self.size, self.size]
    }

    pub fn expand(&self, tape: &mut Tape<T>, kernel: Var) -> Result<Var> {
        expect_shape(tape, kernel, &self.kernel_shape(), "group kernel")?;
        let (n, k) = (self.orientations, self.size);
        let e = tape.sparse_linear(kernel, self.map.clone(), &[n, self.inner * n, k, k])?;
        tape.reshape(e, &[self.outer * n, self.inner * n, k, k])
    }
}

fn expect_shape<T: Scalar>(tape: &Tape<T>, v: Var, want: &[usize], what: &'static str) -> Result<()> {
    if tape.shape(v) != want {
        return Err(Error::shape(what, format!("expected {want:?}, got {:?}", tape.shape(v))));
    }
    Ok(())
}

fn se2_dims<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 5]> {
    match *tape.shape(x) {
        [b, m, n, h, w] => Ok([b, m, n, h, w]),
        ref s => Err(Error::shape(op, format!("expected [B, M, N, H, W], got {s:?}"))),
    }
}

fn unflatten<T: Scalar>(tape: &mut Tape<T>, y: Var, n: usize) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    tape.reshape(y, &[s[0], s[1] / n, n, s[2], s[3]])
}

/// Lifts images `[B, C, H, W]` to an SE(2,N) map `[B, M, N, H', W']`.
pub fn lifting_conv<T: Scalar>(tape: &mut Tape<T>, image: Var, kernel: Var, plan: &LiftingKernel<T>, pad: usize) -> Result<Var> {
    let s = tape.shape(image);
    if s.len() != 4 || s[1] != plan.in_channels {
        return Err(Error::shape("lifting_conv", format!("image {s:?} for {} input channels", plan.in_channels)));
    }
    let expanded = plan.expand(tape, kernel)?;
    let y = tape.conv2d(image, expanded, 1, pad)?;
    unflatten(tape, y, plan.orientations)
}

/// SE(2,N) group correlation with kernels `[M_out, M_in, N, k, k]`.
pub fn se2_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: Var, plan: &GroupKernel<T>, pad: usize) -> Result<Var> {
    let [b, m, n, h, w] = se2_dims(tape, x, "se2_conv")?;
    if n != plan.orientations {
        return Err(Error::shape("se2_conv", format!("input has {n} orientations, kernel {}", plan.orientations)));
    }
    if m != plan.inner {
        return Err(Error::shape("se2_conv", format!("input has {m} channels, kernel expects {}", plan.inner)));
    }
    let expanded = plan.expand(tape, kernel)?;
    let flat = tape.reshape(x, &[b, m * n, h, w])?;
    let y = tape.conv2d(flat, expanded, 1, pad)?;
    unflatten(tape, y, n)
}

/// Transposed SE(2,N) group convolution with kernels `[M_in, M_out, N, k, k]`.
pub fn se2_conv_transpose<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    plan: &GroupKernel<T>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let [b, m, n, h, w] = se2_dims(tape, x, "se2_conv_transpose")?;
    if n != plan.orientations || m != plan.outer {
        return Err(Error::shape(
            "se2_conv_transpose",
            format!("input [{m} channels, {n} orientations], kernel {:?}", plan.kernel_shape()),
        ));
    }
    let expanded = plan.expand(tape, kernel)?;
    let flat = tape.reshape(x, &[b, m * n, h, w])?;
    let y = tape.conv_transpose2d(flat, expanded, stride, pad)?;
    unflatten(tape, y, n)
}

/// Reduces the orientation axis: `[B, M, N, H, W] -> [B, M, H, W]`.
pub fn orientation_project<T: Scalar>(tape: &mut Tape<T>, x: Var, mode: Projection) -> Result<Var> {
    se2_dims(tape, x, "orientation_project")?;
    match mode {
        Projection::Mean => tape.mean_axis(x, 2),
        Projection::Max => tape.max_axis(x, 2),
    }
}

/// Batch norm with per-channel statistics pooled over batch, orientation
/// and space, so the statistics are invariant to orientation shifts.
pub fn orientation_batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats<T>,
    mode: BnMode,
    eps: T,
) -> Result<(Var, Option<BnStats<T>>)> {
    let [b, ..] = se2_dims(tape, x, "orientation_batch_norm")?;
    if mode == BnMode::Train && b < 2 {
        return Err(Error::invalid(format!(
            "training-mode batch norm needs a batch of at least 2, got {b}"
        )));
    }
    tape.batch_norm(x, gamma, beta, 1, running, mode, eps)
}

/// Moves orientation index `j` of `axis` to `(j + k) mod N`.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, axis: usize, k: isize) -> Result<Tensor<T>> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(Error::shape("cyclic_shift", format!("axis {axis} for {s:?}")));
    }
    let (outer, n, inner) = crate::tensor::split_axis(s, axis);
    let shift = k.rem_euclid(n as isize) as usize;
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for j in 0..n {
            let src = (o * n + j) * inner;
            let dst = (o * n + (j + shift) % n) * inner;
            out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
        }
    }
    Tensor::new(s, out)
}

/// Rotates the trailing two (square) axes by `k` counter-clockwise quarter
/// turns; an exact pixel permutation.
pub fn rotate_image<T: Scalar>(x: &Tensor<T>, k: i32) -> Result<Tensor<T>> {
    let index = rot90_index(x.shape(), k)?;
    let d = x.data();
    Tensor::new(x.shape(), index.iter().map(|&i| d[i]).collect())
}

/// The combined group action on an SE(2,N) map: rotate every spatial slice
/// by `k` quarter turns and shift orientations by `k·N/4`.
pub fn rotate_se2<T: Scalar>(x: &Tensor<T>, k: i32) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 5 || s[2] % 4 != 0 {
        return Err(Error::shape("rotate_se2", format!("need [B, M, N, H, W] with 4 | N, got {s:?}")));
    }
    let r = rotate_image(x, k)?;
    cyclic_shift(&r, 2, k as isize * (s[2] / 4) as isize)
}

#[cfg(test)]
mod tests;
