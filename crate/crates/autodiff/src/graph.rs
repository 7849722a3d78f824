//! Dynamically recorded operation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::norm;
use crate::kernels::pool::{self, PoolGeom, PoolKind};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Float;
use crate::tensor::{invert_perm, permute_data, Tensor};

pub(crate) enum Op<T> {
    Input,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        depthwise: bool,
    },
    Pool {
        x: usize,
        geom: PoolGeom,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        batch_stats: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        d: usize,
    },
    Softmax {
        x: usize,
        d: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
        dims: (usize, usize, usize, usize),
    },
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    MeanAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub tracked: bool,
}

/// Recording context for one forward pass.
///
/// Not `Send`: a graph belongs to the thread that builds it. Independent
/// graphs may be built concurrently from a shared `&ParamStore`.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is reported by `backward`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Input, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so each parameter receives its gradient exactly once.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for id in (0..=root.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Input => {
                    if node.tracked {
                        leaves.insert(id, Tensor::new(node.value.shape().to_vec(), gy)?);
                    }
                }
                Op::Param(pid) => {
                    if node.tracked {
                        params.push((*pid, Tensor::new(node.value.shape().to_vec(), gy)?));
                    }
                }
                op => backprop(op, &node.value, gy, &nodes, &mut grads),
            }
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { leaves, params })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Stores parameter gradients, replacing any previous ones.
    pub fn write_to(self, store: &mut ParamStore<T>) {
        for (id, g) in self.params {
            store.get_mut(id).grad = Some(g);
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: Vec<T>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn data<T: Float>(nodes: &[Node<T>], id: usize) -> &[T] {
    nodes[id].value.data()
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn backprop<T: Float>(op: &Op<T>, out: &Tensor<T>, gy: Vec<T>, nodes: &[Node<T>], grads: &mut [Option<Vec<T>>]) {
    let tracked = |id: usize| nodes[id].tracked;
    match op {
        Op::Input | Op::Param(_) => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            if tracked(*b) {
                accumulate(grads, nodes, *b, gy.clone());
            }
            accumulate(grads, nodes, *a, gy);
        }
        Op::Sub(a, b) => {
            if tracked(*b) {
                accumulate(grads, nodes, *b, gy.iter().map(|&g| -g).collect());
            }
            accumulate(grads, nodes, *a, gy);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (data(nodes, *a), data(nodes, *b));
            if tracked(*a) {
                accumulate(grads, nodes, *a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
            }
            if tracked(*b) {
                accumulate(grads, nodes, *b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, gy.iter().map(|&g| g * *s).collect()),
        Op::Relu(a) => {
            let x = data(nodes, *a);
            let g = gy
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Gelu(a) => {
            let x = data(nodes, *a);
            let g = gy.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Tanh(a) => {
            let g = gy
                .iter()
                .zip(out.data())
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect();
            accumulate(grads, nodes, *a, g);
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            let (rows, din, dout) = (*rows, *din, *dout);
            let (xv, wv) = (data(nodes, *x), data(nodes, *w));
            if tracked(*x) {
                let mut dx = vec![T::zero(); rows * din];
                T::gemm(rows, dout, din, T::one(), &gy, (dout as isize, 1), wv, (din as isize, 1), T::zero(), &mut dx, (din as isize, 1));
                accumulate(grads, nodes, *x, dx);
            }
            if tracked(*w) {
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, rows, din, T::one(), &gy, (1, dout as isize), xv, (din as isize, 1), T::zero(), &mut dw, (din as isize, 1));
                accumulate(grads, nodes, *w, dw);
            }
            if let Some(b) = b {
                if tracked(*b) {
                    let mut db = vec![T::zero(); dout];
                    for row in gy.chunks(dout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, nodes, *b, db);
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            depthwise,
        } => {
            let need = (tracked(*x), tracked(*w), b.is_some_and(tracked));
            let (xv, wv) = (data(nodes, *x), data(nodes, *w));
            let r = if *depthwise {
                conv::depthwise_backward(xv, wv, &gy, geom, need)
            } else {
                conv::conv2d_backward(xv, wv, &gy, geom, need)
            };
            if let Some(dx) = r.dx {
                accumulate(grads, nodes, *x, dx);
            }
            if let Some(dw) = r.dw {
                accumulate(grads, nodes, *w, dw);
            }
            if let (Some(db), Some(b)) = (r.db, b) {
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Pool { x, geom, kind, argmax } => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, pool::pool_backward(&gy, geom, *kind, argmax, n));
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dims,
            batch_stats,
        } => {
            let g = norm::channel_norm_backward(&gy, xhat, dims.0, dims.1, dims.2, inv_std, data(nodes, *gamma), *batch_stats);
            accumulate(grads, nodes, *x, g.dx);
            accumulate(grads, nodes, *gamma, g.dgamma);
            accumulate(grads, nodes, *beta, g.dbeta);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            d,
        } => {
            let g = norm::layer_norm_backward(&gy, xhat, inv_std, data(nodes, *gamma), *d);
            accumulate(grads, nodes, *x, g.dx);
            accumulate(grads, nodes, *gamma, g.dgamma);
            accumulate(grads, nodes, *beta, g.dbeta);
        }
        Op::Softmax { x, d } => {
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(*d).zip(y.chunks(*d)).zip(gy.chunks(*d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for i in 0..*d {
                    dxr[i] = yr[i] * (gr[i] - dot);
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Bmm {
            a,
            b,
            trans_a,
            trans_b,
            dims: (g, m, k, n),
        } => {
            let (g, m, k, n) = (*g, *m, *k, *n);
            let (av, bv) = (data(nodes, *a), data(nodes, *b));
            // strides of op(A) (m×k) and op(B) (k×n) inside one batch slice
            let sa: (isize, isize) = if *trans_a { (1, m as isize) } else { (k as isize, 1) };
            let sb: (isize, isize) = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
            if tracked(*a) {
                let mut da = vec![T::zero(); g * m * k];
                for i in 0..g {
                    // d op(A) = dC · op(B)ᵀ, written back through op(A)'s strides
                    T::gemm(m, n, k, T::one(), &gy[i * m * n..], (n as isize, 1), &bv[i * k * n..], (sb.1, sb.0), T::zero(), &mut da[i * m * k..], sa);
                }
                accumulate(grads, nodes, *a, da);
            }
            if tracked(*b) {
                let mut db = vec![T::zero(); g * k * n];
                for i in 0..g {
                    // d op(B) = op(A)ᵀ · dC
                    T::gemm(k, m, n, T::one(), &av[i * m * k..], (sa.1, sa.0), &gy[i * m * n..], (n as isize, 1), T::zero(), &mut db[i * k * n..], sb);
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, gy),
        Op::Permute { x, perm } => {
            let (_, g) = permute_data(out.shape(), &gy, &invert_perm(perm));
            accumulate(grads, nodes, *x, g);
        }
        Op::Concat {
            xs,
            outer,
            inner,
            sizes,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&x, &len) in xs.iter().zip(sizes) {
                if tracked(x) {
                    let mut g = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&gy[start..start + len * inner]);
                    }
                    accumulate(grads, nodes, x, g);
                }
                offset += len;
            }
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![gy[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            accumulate(grads, nodes, *x, vec![gy[0] / T::lit(n as f64); n]);
        }
        Op::MeanAxis { x, outer, len, inner } => {
            let inv = T::one() / T::lit(*len as f64);
            let mut g = vec![T::zero(); outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    for i in 0..*inner {
                        g[(o * len + l) * inner + i] = gy[o * inner + i] * inv;
                    }
                }
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Dropout { x, mask } => {
            accumulate(grads, nodes, *x, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect());
        }
    }
}
