//! Forward definitions of the differentiable operations.

use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::graph::{gelu, Op, Var};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm;
use crate::kernels::pool::{self, PoolGeom, PoolKind};
use crate::rng::CounterRng;
use crate::scalar::Float;
use crate::tensor::{check_perm, numel, permute_data, Tensor};

/// Epsilon shared by batch and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

impl<'g, T: Float> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn graph(&self) -> &'g crate::Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn tracked(&self) -> bool {
        self.graph.tracked(self.id)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let v = self.value();
        self.graph.push(v.map(f), op, self.tracked())
    }

    fn same_shape(&self, other: &Var<'g, T>, op: &'static str) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    fn binary(&self, other: &Var<'g, T>, op: &'static str, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var<'g, T>> {
        let (a, b) = self.same_shape(other, op)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.graph.push(t, rec, self.tracked() || other.tracked()))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(Op::Relu(self.id), |x| x.max(T::zero()))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'g, T> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |x| x.tanh())
    }

    /// `y = x·Wᵀ + b` over the last axis; `weight` is `(Dout, Din)`.
    pub fn linear(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape();
        let (Some(&din), [dout, wdin]) = (xs.last(), w.shape()) else {
            return Err(shape_err("linear", format!("input {:?} / weight {:?} must be (...,Din) / (Dout,Din)", xs, w.shape())));
        };
        let dout = *dout;
        if *wdin != din {
            return Err(shape_err("linear", format!("last input dimension is {din}, weight expects {wdin}")));
        }
        let rows = x.numel() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [dout] {
                return Err(shape_err("linear", format!("bias shape {:?} != [{dout}]", bv.shape())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(rows, din, dout, T::one(), x.data(), (din as isize, 1), w.data(), (1, din as isize), beta, &mut out, (dout as isize, 1));
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let tracked = self.tracked() || weight.tracked() || bias.is_some_and(|b| b.tracked());
        let op = Op::Linear {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            rows,
            din,
            dout,
        };
        Ok(self.graph.push(Tensor::new(shape, out)?, op, tracked))
    }

    /// Cross-correlation of `(B,Cin,H,W)` with `(Cout,Cin,kh,kw)`.
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var<'g, T>> {
        self.conv_impl(weight, bias, stride, padding, false)
    }

    /// Channel-wise convolution with `(C,1,kh,kw)` weights.
    pub fn depthwise_conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var<'g, T>> {
        self.conv_impl(weight, bias, stride, padding, true)
    }

    fn conv_impl(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: (usize, usize), padding: (usize, usize), depthwise: bool) -> Result<Var<'g, T>> {
        let name = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(name, x.shape(), w.shape(), stride, padding, depthwise)?;
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(shape_err(name, format!("bias shape {:?} != [{}]", bv.shape(), geom.cout)));
            }
        }
        let bias_data = bv.as_ref().map(|b| b.data());
        let out = if depthwise {
            conv::depthwise_forward(x.data(), w.data(), bias_data, &geom)
        } else {
            conv::conv2d_forward(x.data(), w.data(), bias_data, &geom)
        };
        let tracked = self.tracked() || weight.tracked() || bias.is_some_and(|b| b.tracked());
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geom,
            depthwise,
        };
        Ok(self.graph.push(Tensor::new(geom.out_shape().to_vec(), out)?, op, tracked))
    }

    /// Non-overlapping 2-D pooling with stride equal to the kernel.
    pub fn pool2d(&self, kernel: (usize, usize), kind: PoolKind) -> Result<Var<'g, T>> {
        let x = self.value();
        let geom = PoolGeom::new(x.shape(), kernel)?;
        if kernel == (1, 1) {
            return Ok(*self);
        }
        let (out, argmax) = pool::pool_forward(x.data(), &geom, kind);
        let shape = vec![x.shape()[0], x.shape()[1], geom.ho, geom.wo];
        let op = Op::Pool {
            x: self.id,
            geom,
            kind,
            argmax,
        };
        Ok(self.graph.push(Tensor::new(shape, out)?, op, self.tracked()))
    }

    pub fn max_pool2d(&self, kernel: (usize, usize)) -> Result<Var<'g, T>> {
        self.pool2d(kernel, PoolKind::Max)
    }

    /// Per-channel normalization of a `(B, C, ...)` tensor. In training mode
    /// batch statistics are used and returned as `(mean, unbiased var)`;
    /// otherwise `running` supplies them.
    pub fn batch_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>, running: Option<(&[T], &[T])>) -> Result<(Var<'g, T>, Option<(Vec<T>, Vec<T>)>)> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("input must be (B,C,...), got {:?}", s)));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner = numel(&s[2..]);
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [channels] || b.shape() != [channels] {
            return Err(shape_err("batch_norm", format!("affine params must be [{channels}]")));
        }
        let eps = T::lit(NORM_EPS);
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = norm::channel_stats(x.data(), batch, channels, inner);
                let n = (batch * inner) as f64;
                let unbiased = v.iter().map(|&v| v * T::lit(n / (n - 1.0).max(1.0))).collect();
                (m.clone(), v, Some((m, unbiased)))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = norm::channel_normalize(x.data(), batch, channels, inner, &mean, &inv_std, g.data(), b.data());
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            dims: (batch, channels, inner),
            batch_stats: running.is_none(),
        };
        let tracked = self.tracked() || gamma.tracked() || beta.tracked();
        Ok((self.graph.push(Tensor::new(s.to_vec(), y)?, op, tracked), stats))
    }

    /// Normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'g, T>, beta: &Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(shape_err("layer_norm", format!("affine params must be [{d}]")));
        }
        let (y, xhat, inv_std) = norm::layer_norm_forward(x.data(), d, g.data(), b.data(), T::lit(NORM_EPS));
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            d,
        };
        let tracked = self.tracked() || gamma.tracked() || beta.tracked();
        Ok(self.graph.push(Tensor::new(x.shape().to_vec(), y)?, op, tracked))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax_last(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let op = Op::Softmax { x: self.id, d };
        Ok(self.graph.push(Tensor::new(x.shape().to_vec(), y)?, op, self.tracked()))
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let rank = self.value().ndim();
        if axis >= rank {
            return Err(shape_err("softmax", format!("axis {axis} out of range for rank {rank}")));
        }
        if axis == rank - 1 {
            return self.softmax_last();
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis, rank - 1);
        self.permute(&perm)?.softmax_last()?.permute(&perm)
    }

    /// Batched matrix product over a leading batch axis: `(G,M,K)·(G,K,N)`,
    /// with optional transposition of either operand's last two axes.
    pub fn bmm(&self, other: &Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (&[g, a1, a2], &[gb, b1, b2]) = (a.shape(), b.shape()) else {
            return Err(shape_err("bmm", format!("operands must be 3-D, got {:?} and {:?}", a.shape(), b.shape())));
        };
        if g != gb {
            return Err(shape_err("bmm", format!("batch dimension {g} vs {gb}")));
        }
        let (m, k) = if trans_a { (a2, a1) } else { (a1, a2) };
        let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if k != kb {
            return Err(shape_err("bmm", format!("inner dimension {k} vs {kb}")));
        }
        let sa: (isize, isize) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
        let sb: (isize, isize) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            T::gemm(m, k, n, T::one(), &a.data()[i * m * k..], sa, &b.data()[i * k * n..], sb, T::zero(), &mut out[i * m * n..], (n as isize, 1));
        }
        let op = Op::Bmm {
            a: self.id,
            b: other.id,
            trans_a,
            trans_b,
            dims: (g, m, k, n),
        };
        Ok(self.graph.push(Tensor::new(vec![g, m, n], out)?, op, self.tracked() || other.tracked()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(shape_err("reshape", format!("cannot view {:?} as {:?}", x.shape(), shape)));
        }
        let t = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self.graph.push(t, Op::Reshape(self.id), self.tracked()))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        check_perm(x.shape(), perm)?;
        let (shape, data) = permute_data(x.shape(), x.data(), perm);
        let op = Op::Permute {
            x: self.id,
            perm: perm.to_vec(),
        };
        Ok(self.graph.push(Tensor::new(shape, data)?, op, self.tracked()))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), self.tracked())
    }

    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let s = v.sum() / T::lit(v.numel() as f64);
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id), self.tracked())
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} out of range for {:?}", s)));
        }
        let outer = numel(&s[..axis]);
        let len = s[axis];
        let inner = numel(&s[axis + 1..]);
        let inv = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..][..inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let op = Op::MeanAxis {
            x: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.graph.push(Tensor::new(shape, out)?, op, self.tracked()))
    }

    /// Inverted dropout with a counter-based mask. `stream` must be unique per
    /// call site and step so that masks are reproducible.
    pub fn dropout(&self, rate: f64, stream: u64) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(crate::TensorError::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let rng = CounterRng::new(stream);
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.numel() as u64)
            .map(|i| if rng.uniform(i) < rate { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let op = Op::Dropout { x: self.id, mask };
        Ok(self.graph.push(Tensor::new(x.shape().to_vec(), data)?, op, self.tracked()))
    }

    /// Mean squared error against `target` (same shape).
    pub fn mse(&self, target: &Var<'g, T>) -> Result<Var<'g, T>> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }
}

/// Concatenation along `axis`.
pub fn concat<'g, T: Float>(xs: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(shape_err("concat", format!("axis {axis} out of range for {:?}", base)));
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let mut sizes = Vec::with_capacity(xs.len());
    let values: Vec<_> = xs.iter().map(|x| x.value()).collect();
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
            return Err(shape_err("concat", format!("shape {:?} incompatible with {:?} on axis {axis}", s, base)));
        }
        sizes.push(s[axis]);
    }
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let tracked = xs.iter().any(|x| x.tracked());
    let op = Op::Concat {
        xs: xs.iter().map(|x| x.id).collect(),
        outer,
        inner,
        sizes,
    };
    Ok(first.graph.push(Tensor::new(shape, out)?, op, tracked))
}
