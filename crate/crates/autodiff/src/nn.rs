//! Parameterized layers and the per-pass forward context.

use std::cell::{Cell, RefCell};

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::pool::PoolKind;
use crate::param::{ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// Mode and randomness for a single forward pass.
pub struct ForwardCtx {
    training: bool,
    dropout_key: CounterRng,
    calls: Cell<u64>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

/// Batch statistics observed during a training pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ForwardCtx {
    /// Training mode: batch-norm uses batch statistics, dropout is active.
    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            dropout_key: CounterRng::new(seed),
            calls: Cell::new(0),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Inference mode: running statistics, no dropout.
    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::train(0)
        }
    }

    /// Batch statistics but no dropout; used for gradient verification.
    pub fn deterministic_train() -> Self {
        Self::train(0)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Next dropout stream identifier; advances a per-pass call counter.
    pub fn next_stream(&self) -> u64 {
        let c = self.calls.get();
        self.calls.set(c + 1);
        self.dropout_key.bits(c)
    }

    pub fn dropout<'g, T: Float>(&self, x: Var<'g, T>, rate: f64) -> Result<Var<'g, T>> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        x.dropout(rate, self.next_stream())
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn apply_bn_updates<T: Float>(&self, store: &mut ParamStore<T>) {
        for u in self.take_bn_updates() {
            for (id, obs) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
                let buf = &mut store.get_mut(id).value;
                for (r, &o) in buf.data_mut().iter_mut().zip(obs) {
                    *r = T::lit((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * o);
                }
            }
        }
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization (Kaiming-uniform with a = √5).
pub fn kaiming_uniform<T: Float>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), kaiming_uniform(vec![dout, din], din, rng), true)?;
        let bias = store.add(format!("{prefix}.bias"), kaiming_uniform(vec![dout], din, rng), true)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            din,
            dout,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        x.linear(&w, b.as_ref())
    }

    pub fn num_params(&self) -> usize {
        self.din * self.dout + if self.bias.is_some() { self.dout } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub depthwise: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel.0 * kernel.1;
        let weight = store.add(format!("{prefix}.weight"), kaiming_uniform(vec![cout, cin, kernel.0, kernel.1], fan_in, rng), true)?;
        let bias = store.add(format!("{prefix}.bias"), kaiming_uniform(vec![cout], fan_in, rng), true)?;
        Ok(Self {
            weight,
            bias,
            stride: (1, 1),
            padding,
            depthwise: false,
        })
    }

    pub fn depthwise<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize, kernel: (usize, usize), padding: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let fan_in = kernel.0 * kernel.1;
        let weight = store.add(format!("{prefix}.weight"), kaiming_uniform(vec![channels, 1, kernel.0, kernel.1], fan_in, rng), true)?;
        let bias = store.add(format!("{prefix}.bias"), kaiming_uniform(vec![channels], fan_in, rng), true)?;
        Ok(Self {
            weight,
            bias,
            stride: (1, 1),
            padding,
            depthwise: true,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        if self.depthwise {
            x.depthwise_conv2d(&w, Some(&b), self.stride, self.padding)
        } else {
            x.conv2d(&w, Some(&b), self.stride, self.padding)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), Tensor::ones(vec![channels]), true)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![channels]), true)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels]), false)?,
            running_var: store.add(format!("{prefix}.running_var"), Tensor::ones(vec![channels]), false)?,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<Var<'g, T>> {
        let gamma = g.param(store, self.weight);
        let beta = g.param(store, self.bias);
        if ctx.training() {
            let (y, stats) = x.batch_norm(&gamma, &beta, None)?;
            if let Some((mean, var)) = stats {
                ctx.bn_updates.borrow_mut().push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean: mean.iter().map(|v| v.as_f64()).collect(),
                    var: var.iter().map(|v| v.as_f64()).collect(),
                });
            }
            Ok(y)
        } else {
            let (m, v) = (store.value(self.running_mean), store.value(self.running_var));
            Ok(x.batch_norm(&gamma, &beta, Some((m.data(), v.data())))?.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), Tensor::ones(vec![dim]), true)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![dim]), true)?,
            dim,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(&g.param(store, self.weight), &g.param(store, self.bias))
    }
}

/// Pooling layer wrapper so model code can switch max/avg from config.
pub fn pool<'g, T: Float>(x: Var<'g, T>, kernel: (usize, usize), kind: PoolKind) -> Result<Var<'g, T>> {
    x.pool2d(kernel, kind)
}
