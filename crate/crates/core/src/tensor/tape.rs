use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::{check_shape, split_axis, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Sparse linear map `out[o] = sum w * x[i]` over `(o, i, w)` triplets.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    pub out_len: usize,
    pub in_len: usize,
    pub entries: Vec<(usize, usize, T)>,
}

/// Two-tap interpolation table along one axis: `out[o] = w0*in[i0] + w1*in[i1]`.
pub(super) type Interp<T> = Vec<(usize, usize, T, T)>;

pub(super) enum Op<T> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    LeakyRelu(Var, T),
    Sum(Var),
    ChannelAffine {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        axis: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Sparse {
        x: Var,
        map: Arc<SparseMap<T>>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    ReduceSum {
        x: Var,
        axis: usize,
    },
    ReduceMean {
        x: Var,
        axis: usize,
    },
    ReduceMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        batch: usize,
        in_ch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        rows: Arc<Interp<T>>,
        cols: Arc<Interp<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    InverseCdf {
        q: Var,
        n: usize,
        eps: Vec<T>,
        anchor: Vec<usize>,
        offset: Vec<usize>,
        cum: Vec<T>,
    },
    AngleEncode {
        z: Var,
        n: usize,
        width: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(_) => "sum",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Matmul { .. } => "matmul",
            Op::Gather { .. } => "gather",
            Op::Sparse { .. } => "sparse_linear",
            Op::Concat { .. } => "concat",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::ReduceMax { .. } => "reduce_max",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Upsample { .. } => "upsample",
            Op::BatchNorm { .. } => "batch_norm",
            Op::InverseCdf { .. } => "inverse_cdf_sample",
            Op::AngleEncode { .. } => "angle_encode",
        }
    }
}

pub(super) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Append-only record of a computation. Inputs of a node always precede it,
/// so reverse insertion order is a valid reverse topological order.
pub struct Tape<T: Scalar> {
    pub(super) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; `requires_grad` marks it as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on push")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First node (in evaluation order) whose value contains NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.first_non_finite
            .map(|(id, op)| format!("node {id} ({op}, shape {:?})", self.nodes[id].shape))
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(super) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(shape, value, op, needs_grad)
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(check_shape(&shape).is_ok());
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.first_non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Square(x)
            | Op::Softplus(x)
            | Op::Clamp(x, ..)
            | Op::LeakyRelu(x, _)
            | Op::Sum(x) => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ChannelAffine { x, scale, shift, .. } => {
                let mut v = vec![*x];
                v.extend(scale.iter().chain(shift.iter()));
                v
            }
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Gather { x, .. }
            | Op::Sparse { x, .. }
            | Op::ReduceSum { x, .. }
            | Op::ReduceMean { x, .. }
            | Op::ReduceMax { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Upsample { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, k, .. } | Op::ConvTranspose2d { x, k, .. } => vec![*x, *k],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::InverseCdf { q, .. } => vec![*q],
            Op::AngleEncode { z, .. } => vec![*z],
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls, so two calls without [`Tape::zero_grad`] double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        for id in (0..=loss.0).rev() {
            let Some(gout) = g[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.grads[id] {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gout),
                }
                continue;
            }
            self.propagate(id, &gout, &mut g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, gout: &[T], g: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.acc_with(g, *x, |d| add_into(d, gout)),
            Op::Add(a, b) => {
                self.acc_with(g, *a, |d| add_into(d, gout));
                self.acc_with(g, *b, |d| add_into(d, gout));
            }
            Op::Sub(a, b) => {
                self.acc_with(g, *a, |d| add_into(d, gout));
                self.acc_with(g, *b, |d| d.iter_mut().zip(gout).for_each(|(d, &go)| *d = *d - go));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc_with(g, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gout[i] * vb[i];
                    }
                });
                self.acc_with(g, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gout[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => self.acc_with(g, *x, |d| d.iter_mut().zip(gout).for_each(|(d, &go)| *d += go * *c)),
            Op::AddScalar(x) => self.acc_with(g, *x, |d| add_into(d, gout)),
            Op::Exp(x) => {
                let y = &node.value;
                self.acc_with(g, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gout[i] * y[i];
                    }
                });
            }
            Op::Ln(x) => {
                let vx = val(*x);
                self.acc_with(g, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gout[i] / vx[i];
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                let two = T::of(2.0);
                self.acc_with(g, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gout[i] * two * vx[i];
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                self.acc_with(g, *x, |d| {
                    for i in 0..d.len() {
                        let s = T::one() / (T::one() + (-vx[i]).exp());
                        d[i] += gout[i] * s;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                self.acc_with(g, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            d[i] += gout[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                self.acc_with(g, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += if vx[i] >= T::zero() { gout[i] } else { gout[i] * *slope };
                    }
                });
            }
            Op::Sum(x) => self.acc_with(g, *x, |d| d.iter_mut().for_each(|d| *d += gout[0])),
            Op::ChannelAffine { x, scale, shift, axis } => {
                let (outer, c, inner) = split_axis(&node.shape, *axis);
                let vx = val(*x);
                let vs = scale.map(|s| val(s));
                if self.want(*x) {
                    self.acc_with(g, *x, |d| {
                        for o in 0..outer {
                            for ch in 0..c {
                                let s = vs.map_or(T::one(), |v| v[ch]);
                                let base = (o * c + ch) * inner;
                                for i in base..base + inner {
                                    d[i] += gout[i] * s;
                                }
                            }
                        }
                    });
                }
                if let Some(s) = scale {
                    self.acc_with(g, *s, |d| {
                        for o in 0..outer {
                            for (ch, dc) in d.iter_mut().enumerate() {
                                let base = (o * c + ch) * inner;
                                let mut acc = T::zero();
                                for i in base..base + inner {
                                    acc += gout[i] * vx[i];
                                }
                                *dc += acc;
                            }
                        }
                    });
                }
                if let Some(b) = shift {
                    self.acc_with(g, *b, |d| {
                        for o in 0..outer {
                            for (ch, dc) in d.iter_mut().enumerate() {
                                let base = (o * c + ch) * inner;
                                let mut acc = T::zero();
                                for &go in &gout[base..base + inner] {
                                    acc += go;
                                }
                                *dc += acc;
                            }
                        }
                    });
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                self.acc_with(g, *a, |d| {
                    T::gemm(m, n, k, T::one(), gout, n as isize, 1, vb, 1, n as isize, T::one(), d, k as isize, 1);
                });
                self.acc_with(g, *b, |d| {
                    T::gemm(k, m, n, T::one(), va, 1, k as isize, gout, n as isize, 1, T::one(), d, n as isize, 1);
                });
            }
            Op::Gather { x, index } => self.acc_with(g, *x, |d| {
                for (o, &i) in index.iter().enumerate() {
                    d[i] += gout[o];
                }
            }),
            Op::Sparse { x, map } => {
                let per = map.out_len;
                let inl = map.in_len;
                self.acc_with(g, *x, |d| {
                    let batches = d.len() / inl;
                    for b in 0..batches {
                        let go = &gout[b * per..(b + 1) * per];
                        let db = &mut d[b * inl..(b + 1) * inl];
                        for &(o, i, w) in &map.entries {
                            db[i] += w * go[o];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut off = 0;
                for &v in inputs {
                    let dim = self.nodes[v.0].shape[*axis];
                    self.acc_with(g, v, |d| {
                        for o in 0..outer {
                            let src = &gout[(o * total + off) * inner..(o * total + off + dim) * inner];
                            add_into(&mut d[o * dim * inner..(o + 1) * dim * inner], src);
                        }
                    });
                    off += dim;
                }
            }
            Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let scale = if matches!(node.op, Op::ReduceMean { .. }) {
                    T::one() / T::of(dim as f64)
                } else {
                    T::one()
                };
                self.acc_with(g, *x, |d| {
                    for o in 0..outer {
                        for j in 0..dim {
                            for i in 0..inner {
                                d[(o * dim + j) * inner + i] += gout[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::ReduceMax { x, argmax, .. } => self.acc_with(g, *x, |d| {
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += gout[o];
                }
            }),
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                self.acc_with(g, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let dot: T = (0..dim).map(|j| gout[at(j)] * y[at(j)]).sum();
                            for j in 0..dim {
                                d[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                self.acc_with(g, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * dim + j) * inner + i;
                            let gs: T = (0..dim).map(|j| gout[at(j)]).sum();
                            for j in 0..dim {
                                d[at(j)] += gout[at(j)] - y[at(j)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, k, geom, batch, out_ch } => {
                let (dx, dk) = conv::conv2d_backward(val(*x), val(*k), gout, *batch, *out_ch, geom, self.want(*x), self.want(*k));
                if let Some(dx) = dx {
                    self.acc_owned(g, *x, dx);
                }
                if let Some(dk) = dk {
                    self.acc_owned(g, *k, dk);
                }
            }
            Op::ConvTranspose2d { x, k, geom, batch, in_ch } => {
                let (dx, dk) = conv::conv_transpose_backward(val(*x), val(*k), gout, *batch, *in_ch, geom, self.want(*x), self.want(*k));
                if let Some(dx) = dx {
                    self.acc_owned(g, *x, dx);
                }
                if let Some(dk) = dk {
                    self.acc_owned(g, *k, dk);
                }
            }
            Op::MaxPool { x, argmax } => self.acc_with(g, *x, |d| {
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += gout[o];
                }
            }),
            Op::Upsample { x, rows, cols } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let (oh, ow) = (rows.len(), cols.len());
                let planes = gout.len() / (oh * ow);
                self.acc_with(g, *x, |d| {
                    let mut tmp = vec![T::zero(); oh * w];
                    for p in 0..planes {
                        let go = &gout[p * oh * ow..(p + 1) * oh * ow];
                        tmp.iter_mut().for_each(|t| *t = T::zero());
                        for r in 0..oh {
                            for (c, &(i0, i1, w0, w1)) in cols.iter().enumerate() {
                                let v = go[r * ow + c];
                                tmp[r * w + i0] += w0 * v;
                                tmp[r * w + i1] += w1 * v;
                            }
                        }
                        let dp = &mut d[p * h * w..(p + 1) * h * w];
                        for (r, &(i0, i1, w0, w1)) in rows.iter().enumerate() {
                            for c in 0..w {
                                let v = tmp[r * w + c];
                                dp[i0 * w + c] += w0 * v;
                                dp[i1 * w + c] += w1 * v;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std } => {
                let (outer, c, inner) = split_axis(&node.shape, *axis);
                let m = T::of((outer * inner) as f64);
                let vg = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += gout[i];
                            sum_gx[ch] += gout[i] * xhat[i];
                        }
                    }
                }
                self.acc_with(g, *x, |d| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let k = vg[ch] * inv_std[ch] / m;
                            let base = (o * c + ch) * inner;
                            for i in base..base + inner {
                                d[i] += k * (m * gout[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                });
                self.acc_with(g, *gamma, |d| add_into(d, &sum_gx));
                self.acc_with(g, *beta, |d| add_into(d, &sum_g));
            }
            Op::InverseCdf { q, n, eps, anchor, offset, cum } => {
                let n = *n;
                let vq = val(*q);
                let w = T::of(std::f64::consts::TAU / n as f64);
                self.acc_with(g, *q, |d| {
                    for r in 0..eps.len() {
                        let row = &vq[r * n..(r + 1) * n];
                        let drow = &mut d[r * n..(r + 1) * n];
                        let j = (anchor[r] + offset[r]) % n;
                        let qj = row[j];
                        for l in 0..offset[r] {
                            drow[(anchor[r] + l) % n] += -gout[r] * w / qj;
                        }
                        drow[j] += -gout[r] * w * (eps[r] - cum[r]) / (qj * qj);
                    }
                });
            }
            Op::AngleEncode { z, n, width } => {
                let n = *n;
                let vz = val(*z);
                let h = T::of(*width as f64);
                let w = T::of(std::f64::consts::TAU / n as f64);
                self.acc_with(g, *z, |d| {
                    for (r, dz) in d.iter_mut().enumerate() {
                        let t = vz[r] / w - T::of(0.5);
                        for j in 0..n {
                            let delta = wrap_bins(t - T::of(j as f64), n);
                            if delta.abs() < h {
                                let sgn = if delta >= T::zero() { T::one() } else { -T::one() };
                                *dz += gout[r * n + j] * (-sgn / (h * h * w));
                            }
                        }
                    }
                });
            }
        }
    }

    fn acc_with(&self, g: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.want(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = g[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn acc_owned(&self, g: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
        match &mut g[v.0] {
            Some(acc) => add_into(acc, &d),
            slot => *slot = Some(d),
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], s: &[T]) {
    d.iter_mut().zip(s).for_each(|(a, &b)| *a += b);
}

/// Wraps a bin-unit offset into `[-n/2, n/2)`.
pub(super) fn wrap_bins<T: Scalar>(d: T, n: usize) -> T {
    let nf = T::of(n as f64);
    let half = nf / T::of(2.0);
    let r = (d + half) % nf;
    let r = if r < T::zero() { r + nf } else { r };
    r - half
}

impl<T: Scalar> Tape<T> {
    /// Smallest distance of any leaky-ReLU input from zero or clamp input
    /// from its bounds; infinite when the tape has neither.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                Op::LeakyRelu(x, _) => {
                    for v in &self.nodes[x.id()].value {
                        m = m.min(v.abs().as_f64());
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    for &v in &self.nodes[x.id()].value {
                        m = m.min((v - *lo).abs().min((v - *hi).abs()).as_f64());
                    }
                }
                _ => {}
            }
        }
        m
    }
}
