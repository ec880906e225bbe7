//! Forward constructors for every differentiable operation.

use std::f64::consts::TAU;
use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::tape::{wrap_bins, BnStats, Interp, Op, SparseMap, Tape, Var};
use super::{split_axis, strides, Scalar};
use crate::error::{Error, Result};

/// Output extent of the 2x2 max pool; odd extents round up.
pub fn pool_out_size(n: usize) -> usize {
    (n + 1) / 2
}

/// Window `[start, end)` of pooled cell `o` along an axis of length `n`.
/// Even lengths tile with width-2 windows. Odd lengths use width-3 windows
/// centred on even indices with one `-inf` cell of padding on each side, so
/// the pattern is mirror-symmetric and commutes with quarter-turn rotations.
fn pool_window(o: usize, n: usize) -> (usize, usize) {
    if n % 2 == 0 {
        (2 * o, 2 * o + 2)
    } else {
        ((2 * o).saturating_sub(1), (2 * o + 2).min(n))
    }
}

fn upsample_table<T: Scalar>(from: usize, to: usize) -> Result<Interp<T>> {
    if to == 2 * from {
        Ok((0..to).map(|o| (o / 2, o / 2, T::one(), T::zero())).collect())
    } else if from >= 1 && to == 2 * from - 1 {
        let half = T::of(0.5);
        Ok((0..to)
            .map(|o| {
                if o % 2 == 0 {
                    (o / 2, o / 2, T::one(), T::zero())
                } else {
                    (o / 2, o / 2 + 1, half, half)
                }
            })
            .collect())
    } else {
        Err(Error::shape(
            "upsample",
            format!("cannot upsample extent {from} to {to}; expected 2n or 2n-1"),
        ))
    }
}

/// Whether a batch-norm layer normalises with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BnStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + keep * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + keep * b;
        }
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), value, op)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        super::check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln(),
            Op::Softplus(x),
        )
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `x * scale[c] + shift[c]` with `c` indexing `axis`.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("channel_affine", format!("axis {axis} for {shape:?}")));
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        for v in scale.iter().chain(shift.iter()) {
            if self.value(*v).len() != c {
                return Err(Error::shape(
                    "channel_affine",
                    format!("per-channel vector {:?} for {c} channels", self.shape(*v)),
                ));
            }
        }
        let vx = self.value(x);
        let vs = scale.map(|s| self.value(s));
        let vb = shift.map(|b| self.value(b));
        let mut out = Vec::with_capacity(vx.len());
        for o in 0..outer {
            for ch in 0..c {
                let s = vs.map_or(T::one(), |v| v[ch]);
                let b = vb.map_or(T::zero(), |v| v[ch]);
                let base = (o * c + ch) * inner;
                out.extend(vx[base..base + inner].iter().map(|&v| v * s + b));
            }
        }
        Ok(self.push(shape, out, Op::ChannelAffine { x, scale, shift, axis }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }))
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, shape: &[usize], index: Arc<[usize]>) -> Result<Var> {
        super::check_shape(shape)?;
        let len = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", format!("{} indices for {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(Error::Index { what: "gather", index: bad, len });
        }
        let vx = self.value(x);
        let value = index.iter().map(|&i| vx[i]).collect();
        Ok(self.push(shape.to_vec(), value, Op::Gather { x, index }))
    }

    /// Applies `map` independently to each trailing block of `map.in_len` values.
    pub fn sparse_linear(&mut self, x: Var, map: Arc<SparseMap<T>>, out_tail: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if len % map.in_len != 0 || out_tail.iter().product::<usize>() != map.out_len {
            return Err(Error::shape(
                "sparse_linear",
                format!("input {:?}, map {}->{}", self.shape(x), map.in_len, map.out_len),
            ));
        }
        let batches = len / map.in_len;
        let vx = self.value(x);
        let mut out = vec![T::zero(); batches * map.out_len];
        for b in 0..batches {
            let xb = &vx[b * map.in_len..(b + 1) * map.in_len];
            let ob = &mut out[b * map.out_len..(b + 1) * map.out_len];
            for &(o, i, w) in &map.entries {
                ob[o] += w * xb[i];
            }
        }
        let mut shape = vec![batches];
        shape.extend_from_slice(out_tail);
        Ok(self.push(shape, out, Op::Sparse { x, map }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(Error::Empty("concat inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let dim = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    fn reduced_shape(&self, x: Var, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::shape("reduce", format!("axis {axis} for {s:?}")));
        }
        let mut out: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out.is_empty() {
            out.push(1);
        }
        Ok(out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(x, axis)?;
        let out = self.reduce_with(x, axis, |vals| vals.iter().copied().sum());
        Ok(self.push(shape, out, Op::ReduceSum { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(x, axis)?;
        let out = self.reduce_with(x, axis, |vals| {
            vals.iter().copied().sum::<T>() / T::of(vals.len() as f64)
        });
        Ok(self.push(shape, out, Op::ReduceMean { x, axis }))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(x, axis)?;
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * dim) * inner + i;
                for j in 1..dim {
                    let at = (o * dim + j) * inner + i;
                    if vx[at] > vx[best] {
                        best = at;
                    }
                }
                out.push(vx[best]);
                argmax.push(best);
            }
        }
        Ok(self.push(shape, out, Op::ReduceMax { x, argmax }))
    }

    fn reduce_with(&self, x: Var, axis: usize, f: impl Fn(&[T]) -> T) -> Vec<T> {
        let (outer, dim, inner) = split_axis(self.shape(x), axis);
        let vx = self.value(x);
        let mut buf = vec![T::zero(); dim];
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = vx[(o * dim + j) * inner + i];
                }
                out.push(f(&buf));
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let lsm = self.log_softmax_values(x, axis)?;
        let value = lsm.iter().map(|v| v.exp()).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.log_softmax_values(x, axis)?;
        Ok(self.push(self.shape(x).to_vec(), value, Op::LogSoftmax { x, axis }))
    }

    fn log_softmax_values(&self, x: Var, axis: usize) -> Result<Vec<T>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let vx = self.value(x);
        let mut out = vec![T::zero(); vx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let mx = (0..dim).map(|j| vx[at(j)]).fold(T::neg_infinity(), T::max);
                let lse = mx + (0..dim).map(|j| (vx[at(j)] - mx).exp()).sum::<T>().ln();
                for j in 0..dim {
                    out[at(j)] = vx[at(j)] - lse;
                }
            }
        }
        Ok(out)
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `kernel: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        check_conv_geometry("conv2d", xs[2], xs[3], ks[2], stride, pad)?;
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ks[2], stride, pad);
        let out = conv::conv2d_forward(self.value(x), self.value(kernel), xs[0], ks[0], &geom);
        let shape = vec![xs[0], ks[0], geom.out_h, geom.out_w];
        Ok(self.push(shape, out, Op::Conv2d { x, k: kernel, geom, batch: xs[0], out_ch: ks[0] }))
    }

    /// Adjoint of [`Tape::conv2d`]: `x: [B, C, H, W]`, `kernel: [C, O, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] || ks[2] != ks[3] {
            return Err(Error::shape("conv_transpose2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        if stride == 0 || (xs[2] - 1) * stride + ks[2] <= 2 * pad || (xs[3] - 1) * stride + ks[2] <= 2 * pad {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("stride {stride}, padding {pad} and kernel {} leave no output for {xs:?}", ks[2]),
            ));
        }
        let oh = conv::conv_transpose_out_size(xs[2], ks[2], stride, pad);
        let ow = conv::conv_transpose_out_size(xs[3], ks[2], stride, pad);
        let geom = ConvGeom::new(ks[1], oh, ow, ks[2], stride, pad);
        debug_assert_eq!((geom.out_h, geom.out_w), (xs[2], xs[3]));
        let out = conv::conv_transpose_forward(self.value(x), self.value(kernel), xs[0], xs[1], &geom);
        let shape = vec![xs[0], ks[1], oh, ow];
        Ok(self.push(shape, out, Op::ConvTranspose2d { x, k: kernel, geom, batch: xs[0], in_ch: xs[1] }))
    }

    /// 2x2 max pooling over the last two axes. Ties go to the first cell in
    /// row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("max_pool2d", format!("need >= 2 axes, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (oh, ow) = (pool_out_size(h), pool_out_size(w));
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let vx = self.value(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                let (y0, y1) = pool_window(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = pool_window(ox, w);
                    let mut best = base + y0 * w + x0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let at = base + y * w + xx;
                            if vx[at] > vx[best] {
                                best = at;
                            }
                        }
                    }
                    out.push(vx[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(self.push(shape, out, Op::MaxPool { x, argmax }))
    }

    /// Upsamples the last two axes to `(out_h, out_w)`: nearest-neighbour for
    /// exact doubling, midpoint interpolation for `2n - 1`.
    pub fn upsample2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("upsample", format!("need >= 2 axes, got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let rows: Arc<Interp<T>> = Arc::new(upsample_table(h, out_h)?);
        let cols: Arc<Interp<T>> = Arc::new(upsample_table(w, out_w)?);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let vx = self.value(x);
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &vx[p * h * w..(p + 1) * h * w];
            for &(r0, r1, a0, a1) in rows.iter() {
                for &(c0, c1, b0, b1) in cols.iter() {
                    let top = b0 * plane[r0 * w + c0] + b1 * plane[r0 * w + c1];
                    let bot = b0 * plane[r1 * w + c0] + b1 * plane[r1 * w + c1];
                    out.push(a0 * top + a1 * bot);
                }
            }
        }
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] = out_h;
        shape[n - 1] = out_w;
        Ok(self.push(shape, out, Op::Upsample { x, rows, cols }))
    }

    /// Training-mode batch normalisation: statistics over every axis except
    /// `axis`. Returns the biased batch statistics for running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: T) -> Result<(Var, BnStats<T>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("batch_norm", format!("axis {axis} for {shape:?}")));
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", format!("{c} channels, scale/shift of wrong length")));
        }
        let m = outer * inner;
        if m == 0 {
            return Err(Error::Empty("batch-norm reduction"));
        }
        let vx = self.value(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += vx[base..base + inner].iter().copied().sum::<T>();
            }
        }
        let mf = T::of(m as f64);
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += vx[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(vx.len());
        let mut out = Vec::with_capacity(vx.len());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for &v in &vx[base..base + inner] {
                    let h = (v - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    out.push(h * vg[ch] + vb[ch]);
                }
            }
        }
        let stats = BnStats { mean, var };
        let v = self.push(shape, out, Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std });
        Ok((v, stats))
    }

    /// Evaluation-mode batch normalisation with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let c = self.value(gamma).len();
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let inv_v = self.constant(&[c], inv)?;
        let mean_v = self.constant(&[c], mean.to_vec())?;
        let scale = self.mul(gamma, inv_v)?;
        let centre = self.mul(scale, mean_v)?;
        let shift = self.sub(beta, centre)?;
        self.channel_affine(x, Some(scale), Some(shift), axis)
    }

    /// Batch norm in either mode. Train mode also returns the batch
    /// statistics so the caller can decide whether to fold them into `running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        running: &RunningStats<T>,
        mode: BnMode,
        eps: T,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        match mode {
            BnMode::Train => {
                let (y, stats) = self.batch_norm_train(x, gamma, beta, axis, eps)?;
                Ok((y, Some(stats)))
            }
            BnMode::Eval => Ok((self.batch_norm_eval(x, gamma, beta, axis, &running.mean, &running.var, eps)?, None)),
        }
    }

    /// Inverse-transform sampling from piecewise-constant angular densities.
    ///
    /// `q` holds bin masses along its last axis (`n` bins of width 2π/n).
    /// The CDF is accumulated starting at the row's most probable bin, which
    /// makes the sampler commute with cyclic shifts of `q` at fixed `eps`.
    pub fn inverse_cdf_sample(&mut self, q: Var, eps: &[T]) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let n = *qs.last().expect("shapes are non-empty");
        let rows = self.value(q).len() / n;
        if eps.len() != rows {
            return Err(Error::shape("inverse_cdf_sample", format!("{} noise values for {rows} rows", eps.len())));
        }
        let vq = self.value(q);
        let w = T::of(TAU / n as f64);
        let mut out = Vec::with_capacity(rows);
        let (mut anchor, mut offset, mut cum) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..rows {
            let row = &vq[r * n..(r + 1) * n];
            let total: T = row.iter().copied().sum();
            if row.iter().any(|&v| v < T::zero() || !v.is_finite()) || (total - T::one()).abs().as_f64() > 1e-4 {
                return Err(Error::invalid(format!(
                    "row {r} of the angular posterior is not on the simplex (sum {total})"
                )));
            }
            let e = eps[r];
            if !(e > T::zero() && e < T::one()) {
                return Err(Error::invalid(format!("uniform noise {e} outside (0, 1)")));
            }
            let a = argmax_first(row);
            let mut c = T::zero();
            let mut chosen = None;
            let mut last_positive = 0;
            for l in 0..n {
                let ql = row[(a + l) % n];
                if ql > T::zero() {
                    last_positive = l;
                    if e <= c + ql {
                        chosen = Some((l, c));
                        break;
                    }
                }
                c += ql;
            }
            let (l, c_before) = chosen.unwrap_or_else(|| {
                let before: T = (0..last_positive).map(|i| row[(a + i) % n]).sum();
                (last_positive, before)
            });
            let qj = row[(a + l) % n];
            let frac = ((e - c_before) / qj).min(T::one());
            let mut t = T::of((a + l) as f64) + frac;
            let nf = T::of(n as f64);
            if t >= nf {
                t = t - nf;
            }
            let mut z = t * w;
            if z >= T::of(TAU) {
                z = T::zero();
            }
            out.push(z);
            anchor.push(a);
            offset.push(l);
            cum.push(c_before);
        }
        let shape = if qs.len() > 1 { qs[..qs.len() - 1].to_vec() } else { vec![1] };
        Ok(self.push(shape, out, Op::InverseCdf { q, n, eps: eps.to_vec(), anchor, offset, cum }))
    }

    /// Soft one-hot encoding of angles onto `n` orientation bins centred at
    /// `(j + 1/2) * 2π/n`, with a triangular kernel of half-width `width` bins.
    pub fn angle_encode(&mut self, z: Var, n: usize, width: usize) -> Result<Var> {
        if width == 0 || 2 * width > n {
            return Err(Error::invalid(format!("smoothing width {width} for {n} bins")));
        }
        let vz = self.value(z);
        let w = T::of(TAU / n as f64);
        let h = T::of(width as f64);
        let mut out = Vec::with_capacity(vz.len() * n);
        for &angle in vz {
            let t = angle / w - T::of(0.5);
            for j in 0..n {
                let d = wrap_bins(t - T::of(j as f64), n).abs();
                out.push(if d < h { (T::one() - d / h) / h } else { T::zero() });
            }
        }
        let mut shape = self.shape(z).to_vec();
        shape.push(n);
        Ok(self.push(shape, out, Op::AngleEncode { z, n, width }))
    }

    // Index-based helpers built on `gather`.

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {xs:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let in_strides = strides(&xs);
        let index = map_indices(&out_shape, |coord| {
            coord.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum()
        });
        self.gather(x, &out_shape, index)
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape("slice", format!("axis {axis} [{start}, {}) of {xs:?}", start + len)));
        }
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let st = strides(&xs);
        let index = map_indices(&out_shape, |coord| {
            coord.iter().enumerate().map(|(i, &c)| if i == axis { (c + start) * st[i] } else { c * st[i] }).sum()
        });
        self.gather(x, &out_shape, index)
    }

    /// Moves index `j` of `axis` to `(j + k) mod n`.
    pub fn roll_axis(&mut self, x: Var, axis: usize, k: isize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape("roll", format!("axis {axis} for {xs:?}")));
        }
        let n = xs[axis] as isize;
        let st = strides(&xs);
        let index = map_indices(&xs, |coord| {
            coord
                .iter()
                .enumerate()
                .map(|(i, &c)| if i == axis { ((c as isize - k).rem_euclid(n)) as usize * st[i] } else { c * st[i] })
                .sum()
        });
        self.gather(x, &xs, index)
    }

    /// Inserts a new axis of length `n` at `axis`, repeating values along it.
    pub fn repeat_new_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis > xs.len() || n == 0 {
            return Err(Error::shape("repeat", format!("axis {axis} for {xs:?}")));
        }
        let mut out_shape = xs.clone();
        out_shape.insert(axis, n);
        let st = strides(&xs);
        let index = map_indices(&out_shape, |coord| {
            coord
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != axis)
                .map(|(i, &c)| c * st[if i > axis { i - 1 } else { i }])
                .sum()
        });
        self.gather(x, &out_shape, index)
    }

    /// Rotates the last two (square) axes by `k` counter-clockwise quarter turns.
    pub fn rot90(&mut self, x: Var, k: i32) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let index = rot90_index(&xs, k)?;
        self.gather(x, &xs, index)
    }
}

fn check_conv_geometry(op: &'static str, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1"));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::shape(op, format!("kernel {k} exceeds padded input {h}x{w} (padding {pad})")));
    }
    Ok(())
}

fn argmax_first<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn map_indices(shape: &[usize], f: impl Fn(&[usize]) -> usize) -> Arc<[usize]> {
    let n: usize = shape.iter().product();
    let mut coord = vec![0; shape.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(&coord));
        for ax in (0..shape.len()).rev() {
            coord[ax] += 1;
            if coord[ax] < shape[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    out.into()
}

/// Gather index for a counter-clockwise rotation by `k` quarter turns of the
/// last two axes: `out[r][c] = in[c][n-1-r]` for one turn.
pub(crate) fn rot90_index(shape: &[usize], k: i32) -> Result<Arc<[usize]>> {
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != shape[nd - 2] {
        return Err(Error::shape("rotate", format!("square trailing axes required, got {shape:?}")));
    }
    let n = shape[nd - 1];
    let planes: usize = shape[..nd - 2].iter().product();
    let turns = k.rem_euclid(4);
    let mut out = Vec::with_capacity(planes * n * n);
    for p in 0..planes {
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = match turns {
                    0 => (r, c),
                    1 => (c, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - c),
                    _ => (n - 1 - c, r),
                };
                out.push(p * n * n + sr * n + sc);
            }
        }
    }
    Ok(out.into())
}
