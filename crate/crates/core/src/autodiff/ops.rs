//! Differentiable operations: forward constructors on [`Var`] and the
//! matching adjoints.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalization epsilon for batch norm.
pub const BN_EPS: f64 = 1e-5;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: T },
    LeakyRelu { x: usize, alpha: T },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize },
    Reshape { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Mean { x: usize, axis: usize },
    Sum { x: usize },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ConvTranspose { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    MaxPool { x: usize, argmax: Vec<u32> },
    Upsample2 { x: usize, planes: usize, input: [usize; 3] },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Bce { p: usize, target: Vec<T>, eps: T },
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and report them for running averages.
    Train,
    /// Normalize with stored running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch mean and unbiased variance observed in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Op<T> {
    pub fn backward(
        &self,
        out: &Tensor<T>,
        gout: &Tensor<T>,
        nodes: &[Node<T>],
        emit: &mut dyn FnMut(usize, Tensor<T>),
    ) -> Result<()> {
        let val = |i: usize| &nodes[i].value;
        let wants = |i: usize| nodes[i].requires_grad;
        let g = gout.data();
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let da = gemm_new(m, n, k, g, n as isize, 1, bv.data(), 1, n as isize);
                    emit(*a, Tensor::new([m, k], da)?);
                }
                if wants(*b) {
                    let db = gemm_new(k, m, n, av.data(), 1, k as isize, g, n as isize, 1);
                    emit(*b, Tensor::new([k, n], db)?);
                }
            }
            Op::Transpose { x } => {
                let s = gout.shape();
                emit(*x, Tensor::new([s[1], s[0]], transpose2(g, s[0], s[1]))?);
            }
            Op::Add { a, b } => {
                emit(*a, gout.clone());
                emit(*b, gout.clone());
            }
            Op::AddRow { x, bias } => {
                emit(*x, gout.clone());
                if wants(*bias) {
                    let n = val(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    emit(*bias, Tensor::new([n], db)?);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    emit(*a, zip_map(gout, bv, |g, b| g * b));
                }
                if wants(*b) {
                    emit(*b, zip_map(gout, av, |g, a| g * a));
                }
            }
            Op::Scale { x, s } => emit(*x, map(gout, |v| v * *s)),
            Op::LeakyRelu { x, alpha } => {
                emit(*x, zip_map(gout, val(*x), |g, v| if v > T::zero() { g } else { g * *alpha }));
            }
            Op::Relu { x } => {
                emit(*x, zip_map(gout, val(*x), |g, v| if v > T::zero() { g } else { T::zero() }));
            }
            Op::Sigmoid { x } => {
                emit(*x, zip_map(gout, out, |g, y| g * y * (T::one() - y)));
            }
            Op::Softmax { x } => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); g.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gv - dot);
                    }
                }
                emit(*x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Reshape { x } => {
                emit(*x, gout.clone().reshape(val(*x).shape().to_vec())?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let shape = val(i).shape().to_vec();
                    let width = shape[*axis] * inner;
                    if wants(i) {
                        let mut d = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + width]);
                        }
                        emit(i, Tensor::new(shape, d)?);
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape().to_vec();
                let (outer, ax, inner) = split_axis(&xs, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![T::zero(); outer * ax * inner];
                for o in 0..outer {
                    let dst = o * ax * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                emit(*x, Tensor::new(xs, dx)?);
            }
            Op::Mean { x, axis } => {
                let xs = val(*x).shape().to_vec();
                let (outer, ax, inner) = split_axis(&xs, *axis);
                let scale = T::one() / T::of(ax as f64);
                let mut dx = Vec::with_capacity(outer * ax * inner);
                for o in 0..outer {
                    for _ in 0..ax {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                emit(*x, Tensor::new(xs, dx)?);
            }
            Op::Sum { x } => {
                emit(*x, Tensor::full(val(*x).shape().to_vec(), g[0]));
            }
            Op::Conv { x, w, b, geom } => {
                if wants(*x) {
                    let dx = kernels::conv_backward_input(g, val(*w).data(), geom);
                    emit(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
                if wants(*w) {
                    let dw = kernels::conv_backward_weight(g, val(*x).data(), geom);
                    emit(*w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        emit(*b, Tensor::new([geom.c_out], channel_sum(g, geom.c_out, geom.out_size()))?);
                    }
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                if wants(*x) {
                    let dx = kernels::conv_forward(g, val(*w).data(), None, geom);
                    emit(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
                if wants(*w) {
                    let dw = kernels::conv_backward_weight(val(*x).data(), g, geom);
                    emit(*w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        emit(*b, Tensor::new([geom.c_in], channel_sum(g, geom.c_in, geom.in_size()))?);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = val(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx as usize] = dx[idx as usize] + gv;
                }
                emit(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Upsample2 { x, planes, input } => {
                let dx = kernels::upsample2_backward(g, *planes, *input);
                emit(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = val(*x).shape().to_vec();
                let (n, c, plane) = (xs[0], xs[1], xs[2..].iter().product::<usize>());
                let gam = val(*gamma).data();
                let m = T::of((n * plane) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = if *train {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    emit(*x, Tensor::new(xs, dx)?);
                }
                if wants(*gamma) {
                    emit(*gamma, Tensor::new([c], sum_gx)?);
                }
                if wants(*beta) {
                    emit(*beta, Tensor::new([c], sum_g)?);
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = val(*p);
                let scale = g[0] / T::of(pv.len() as f64);
                let hi = T::one() - *eps;
                let dp: Vec<T> = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p <= *eps || p >= hi {
                            T::zero()
                        } else {
                            scale * ((T::one() - t) / (T::one() - p) - t / p)
                        }
                    })
                    .collect();
                emit(*p, Tensor::new(pv.shape().to_vec(), dp)?);
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_new<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if m * n == 0 {
        return c;
    }
    // SAFETY: callers pass extents and strides that describe `a` ([m,k]) and
    // `b` ([k,n]) within their slices; `c` is a fresh row-major [m,n] buffer.
    unsafe {
        T::gemm(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, T::zero(), c.as_mut_ptr(), n as isize, 1);
    }
    c
}

fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn map<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn channel_sum<T: Scalar>(g: &[T], c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for sample in g.chunks(c * plane) {
        for (k, p) in sample.chunks(plane).enumerate() {
            out[k] = out[k] + p.iter().copied().sum::<T>();
        }
    }
    out
}

/// (product of leading extents, extent at `axis`, product of trailing extents)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Graph<T> {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?.shape();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        for s in &shapes {
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("cannot join {first:?} and {s:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for (v, s) in values.iter().zip(&shapes) {
                    let width = s[axis] * inner;
                    data.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires_grad(&ids);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: ids, axis }, rg))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn binary(self, other: Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.graph.requires_grad(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    /// `[m,k]·[k,n] → [m,n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            Tensor::new([m, n], gemm_new(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1))?
        };
        Ok(self.binary(other, value, Op::MatMul { a: self.id, b: other.id }))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            if x.rank() != 2 {
                return Err(Error::dim("transpose", format!("expected a matrix, got {:?}", x.shape())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            Tensor::new([c, r], transpose2(x.data(), r, c))?
        };
        Ok(self.unary(value, Op::Transpose { x: self.id }))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            zip_map(&a, &b, |x, y| x + y)
        };
        Ok(self.binary(other, value, Op::Add { a: self.id, b: other.id }))
    }

    /// Adds a `[n]` vector to every length-`n` row of `self`.
    pub fn add_row(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let (x, b) = (self.value(), bias.value());
            let n = b.len();
            if b.rank() != 1 || x.shape().last() != Some(&n) {
                return Err(Error::dim("add_row", format!("{:?} + row {:?}", x.shape(), b.shape())));
            }
            let data = x.data().chunks(n).flat_map(|r| r.iter().zip(b.data()).map(|(&a, &c)| a + c)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.binary(bias, value, Op::AddRow { x: self.id, bias: bias.id }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            zip_map(&a, &b, |x, y| x * y)
        };
        Ok(self.binary(other, value, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let value = map(&self.value(), |v| v * s);
        self.unary(value, Op::Scale { x: self.id, s })
    }

    pub fn leaky_relu(self, alpha: T) -> Var<'g, T> {
        let value = map(&self.value(), |v| if v > T::zero() { v } else { v * alpha });
        self.unary(value, Op::LeakyRelu { x: self.id, alpha })
    }

    pub fn relu(self) -> Var<'g, T> {
        let value = map(&self.value(), |v| if v > T::zero() { v } else { T::zero() });
        self.unary(value, Op::Relu { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let value = map(&self.value(), sigmoid);
        self.unary(value, Op::Sigmoid { x: self.id })
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(self) -> Var<'g, T> {
        let value = {
            let x = self.value();
            let n = *x.shape().last().unwrap_or(&1);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let start = out.len();
                out.extend(row.iter().map(|&v| (v - max).exp()));
                let total: T = out[start..].iter().copied().sum();
                for v in &mut out[start..] {
                    *v = *v / total;
                }
            }
            Tensor::new(x.shape().to_vec(), out).expect("same shape")
        };
        self.unary(value, Op::Softmax { x: self.id })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape { x: self.id }))
    }

    /// Collapses all axes after the first.
    pub fn flatten(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let lead = *shape.first().ok_or_else(|| Error::dim("flatten", "rank-0 input"))?;
        self.reshape([lead, shape[1..].iter().product()])
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let s = x.shape();
            if axis >= s.len() || len == 0 || start + len > s[axis] {
                return Err(Error::dim("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
            }
            let (outer, ax, inner) = split_axis(s, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = o * ax * inner + start * inner;
                data.extend_from_slice(&x.data()[src..src + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.unary(value, Op::Slice { x: self.id, axis, start }))
    }

    /// Mean along `axis`, removing that axis.
    pub fn mean(self, axis: usize) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let s = x.shape();
            if axis >= s.len() || s[axis] == 0 {
                return Err(Error::dim("mean", format!("axis {axis} of {s:?}")));
            }
            let (outer, ax, inner) = split_axis(s, axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for a in 0..ax {
                    let src = &x.data()[(o * ax + a) * inner..(o * ax + a + 1) * inner];
                    for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
            let denom = T::of(ax as f64);
            data.iter_mut().for_each(|v| *v = *v / denom);
            let mut shape = s.to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)?
        };
        Ok(self.unary(value, Op::Mean { x: self.id, axis }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'g, T> {
        let value = Tensor::scalar(self.value().data().iter().copied().sum());
        self.unary(value, Op::Sum { x: self.id })
    }

    fn conv_inner(
        self,
        op: &'static str,
        w: Var<'g, T>,
        b: Option<Var<'g, T>>,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        spatial_rank: usize,
    ) -> Result<Var<'g, T>> {
        let (geom, value) = {
            let (x, wv) = (self.value(), w.value());
            let (xs, ws) = (x.shape(), wv.shape());
            let rank = spatial_rank + 2;
            if xs.len() != rank || ws.len() != rank || xs[1] != ws[1] {
                return Err(Error::dim(op, format!("input {xs:?} incompatible with weight {ws:?}")));
            }
            let input = lift3(&xs[2..]);
            let geom = ConvGeom::new(op, xs[0], xs[1], input, ws[0], kernel, stride, pad)?;
            let bias = b.map(|b| b.value().clone());
            if let Some(bt) = &bias {
                if bt.shape() != [ws[0]] {
                    return Err(Error::dim(op, format!("bias {:?} for {} output channels", bt.shape(), ws[0])));
                }
            }
            let data = kernels::conv_forward(x.data(), wv.data(), bias.as_ref().map(|t| t.data()), &geom);
            let mut shape = vec![xs[0], ws[0]];
            shape.extend_from_slice(&geom.output[3 - spatial_rank..]);
            (geom.clone(), Tensor::new(shape, data)?)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.graph.requires_grad(&ids);
        Ok(self.graph.push(value, Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg))
    }

    /// Cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]`, zero padding.
    pub fn conv2d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let ws = w.shape();
        if ws.len() != 4 {
            return Err(Error::dim("conv2d", format!("weight must be rank 4, got {ws:?}")));
        }
        self.conv_inner("conv2d", w, b, [1, ws[2], ws[3]], [1, stride, stride], [0, pad, pad], 2)
    }

    /// Cross-correlation of `[N,C,D,H,W]` with `[K,C,kd,kh,kw]`, zero padding.
    pub fn conv3d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let ws = w.shape();
        if ws.len() != 5 {
            return Err(Error::dim("conv3d", format!("weight must be rank 5, got {ws:?}")));
        }
        self.conv_inner("conv3d", w, b, [ws[2], ws[3], ws[4]], [stride; 3], [pad; 3], 3)
    }

    /// Transposed 3D convolution with weight `[C_in, C_out, k, k, k]`.
    /// Output extent is `(in − 1)·stride − 2·pad + k + output_padding`.
    pub fn conv_transpose3d(
        self,
        w: Var<'g, T>,
        b: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var<'g, T>> {
        let op = "conv_transpose3d";
        let (geom, value) = {
            let (x, wv) = (self.value(), w.value());
            let (xs, ws) = (x.shape(), wv.shape());
            if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[0] {
                return Err(Error::dim(op, format!("input {xs:?} incompatible with weight {ws:?}")));
            }
            if output_padding >= stride {
                return Err(Error::dim(op, "output padding must be smaller than stride"));
            }
            let kernel = [ws[2], ws[3], ws[4]];
            let mut out_sp = [0; 3];
            for d in 0..3 {
                let full = (xs[2 + d] - 1) * stride + kernel[d] + output_padding;
                if full <= 2 * pad {
                    return Err(Error::dim(op, format!("non-positive output extent for input {xs:?}")));
                }
                out_sp[d] = full - 2 * pad;
            }
            // Conv orientation: the transposed output is the conv input.
            let geom = ConvGeom::new(op, xs[0], ws[1], out_sp, ws[0], kernel, [stride; 3], [pad; 3])?;
            debug_assert_eq!(geom.output, [xs[2], xs[3], xs[4]]);
            let mut data = kernels::conv_backward_input(x.data(), wv.data(), &geom);
            if let Some(b) = b {
                let bv = b.value();
                if bv.shape() != [ws[1]] {
                    return Err(Error::dim(op, format!("bias {:?} for {} output channels", bv.shape(), ws[1])));
                }
                let plane = geom.in_size();
                for sample in data.chunks_mut(ws[1] * plane) {
                    for (k, p) in sample.chunks_mut(plane).enumerate() {
                        p.iter_mut().for_each(|v| *v = *v + bv.data()[k]);
                    }
                }
            }
            let shape = vec![xs[0], ws[1], out_sp[0], out_sp[1], out_sp[2]];
            (geom.clone(), Tensor::new(shape, data)?)
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.graph.requires_grad(&ids);
        Ok(self.graph.push(value, Op::ConvTranspose { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg))
    }

    fn maxpool_inner(self, op: &'static str, spatial_rank: usize) -> Result<Var<'g, T>> {
        let (argmax, value) = {
            let x = self.value();
            let xs = x.shape();
            if xs.len() != spatial_rank + 2 {
                return Err(Error::dim(op, format!("expected rank {}, got {xs:?}", spatial_rank + 2)));
            }
            let window = if spatial_rank == 2 { [1, 2, 2] } else { [2, 2, 2] };
            let geom = PoolGeom::new(op, xs[0], xs[1], lift3(&xs[2..]), window)?;
            let (vals, argmax) = kernels::maxpool_forward(x.data(), &geom);
            let mut shape = xs[..2].to_vec();
            shape.extend_from_slice(&geom.output[3 - spatial_rank..]);
            (argmax, Tensor::new(shape, vals)?)
        };
        Ok(self.unary(value, Op::MaxPool { x: self.id, argmax }))
    }

    /// 2×2 max pool, stride 2, over `[N,C,H,W]`.
    pub fn maxpool2d(self) -> Result<Var<'g, T>> {
        self.maxpool_inner("maxpool2d", 2)
    }

    /// 2×2×2 max pool, stride 2, over `[N,C,D,H,W]`.
    pub fn maxpool3d(self) -> Result<Var<'g, T>> {
        self.maxpool_inner("maxpool3d", 3)
    }

    /// Nearest-neighbour ×2 upsampling of `[N,C,D,H,W]`.
    pub fn upsample3d(self) -> Result<Var<'g, T>> {
        let (planes, input, value) = {
            let x = self.value();
            let xs = x.shape();
            if xs.len() != 5 {
                return Err(Error::dim("upsample3d", format!("expected rank 5, got {xs:?}")));
            }
            let input = [xs[2], xs[3], xs[4]];
            let planes = xs[0] * xs[1];
            let data = kernels::upsample2_forward(x.data(), planes, input);
            (planes, input, Tensor::new([xs[0], xs[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]], data)?)
        };
        Ok(self.unary(value, Op::Upsample2 { x: self.id, planes, input }))
    }

    /// Per-channel normalization over batch and spatial axes of `[N,C,...]`.
    pub fn batch_norm(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mode: BnMode<'_, T>,
    ) -> Result<(Var<'g, T>, Option<BatchStats<T>>)> {
        let eps = T::of(BN_EPS);
        let (value, xhat, inv_std, stats) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            let xs = x.shape();
            if xs.len() < 2 || xs[0] == 0 {
                return Err(Error::dim("batchnorm", format!("need a non-empty batch, got {xs:?}")));
            }
            let (n, c, plane) = (xs[0], xs[1], xs[2..].iter().product::<usize>());
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(Error::dim("batchnorm", format!("affine parameters must be [{c}]")));
            }
            let count = n * plane;
            let (mean, var, stats) = match mode {
                BnMode::Train => {
                    let mut mean = vec![0.0f64; c];
                    let mut var = vec![0.0f64; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            mean[ch] += x.data()[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count as f64);
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            var[ch] += x.data()[base..base + plane]
                                .iter()
                                .map(|v| (v.as_f64() - mean[ch]).powi(2))
                                .sum::<f64>();
                        }
                    }
                    let unbiased: Vec<T> = var.iter().map(|v| T::of(v / (count.max(2) - 1) as f64)).collect();
                    let biased: Vec<T> = var.iter().map(|v| T::of(v / count as f64)).collect();
                    let mean: Vec<T> = mean.into_iter().map(T::of).collect();
                    (mean.clone(), biased, Some(BatchStats { mean, var: unbiased }))
                }
                BnMode::Eval { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(Error::dim("batchnorm", "running statistics length mismatch"));
                    }
                    (mean.to_vec(), var.to_vec(), None)
                }
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); x.len()];
            let mut out = vec![T::zero(); x.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                        out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                    }
                }
            }
            (Tensor::new(xs.to_vec(), out)?, xhat, inv_std, stats)
        };
        let rg = self.graph.requires_grad(&[self.id, gamma.id, beta.id]);
        let train = matches!(mode, BnMode::Train);
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train };
        Ok((self.graph.push(value, op, rg), stats))
    }

    /// Mean voxel-wise binary cross-entropy against a binary `target`, with
    /// predictions clipped to `[eps, 1 − eps]`.
    pub fn bce(self, target: &Tensor<T>, eps: f64) -> Result<Var<'g, T>> {
        let eps_t = T::of(eps);
        let value = {
            let p = self.value();
            if p.shape() != target.shape() {
                return Err(Error::dim("bce", format!("prediction {:?} vs target {:?}", p.shape(), target.shape())));
            }
            if p.is_empty() {
                return Err(Error::dim("bce", "empty prediction"));
            }
            if let Some(bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
                return Err(Error::Data(format!("target must be binary, found {bad}")));
            }
            let hi = T::one() - eps_t;
            let total: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&pv, &t)| {
                    let q = pv.max(eps_t).min(hi).as_f64();
                    let t = t.as_f64();
                    -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
                })
                .sum();
            Tensor::scalar(T::of(total / p.len() as f64))
        };
        Ok(self.unary(value, Op::Bce { p: self.id, target: target.data().to_vec(), eps: eps_t }))
    }
}

fn lift3(spatial: &[usize]) -> [usize; 3] {
    match spatial {
        [h, w] => [1, *h, *w],
        [d, h, w] => [*d, *h, *w],
        _ => [0, 0, 0],
    }
}
