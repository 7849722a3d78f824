//! The CST-former network.
//!
//! Encoder (three conv blocks with T-F pooling) → CST blocks → FC head.
//! Output is `(B, T′, tracks·3·K)` with flat index `track·3K + axis·K + class`.

mod blocks;
mod config;
mod patches;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seld_autodiff::nn::Linear;
use seld_autodiff::{Float, ForwardCtx, Graph, ParamStore, Tensor, TensorError, Var};

pub use blocks::{AttentionSublayer, ConvBlock, CstAttention, CstBlock, Irffn, Lpu, ShapeTrace};
pub use config::{ModelConfig, PoolType, Pooling, Variant, POOL_F, POOL_T};
pub use patches::{fold_patches, fold_tensor, patch_index, unfold_patches, unfold_tensor};

use crate::error::{Result, SeldError};
use blocks::trace;

/// Scale applied to the default init of the last head layer; its bias starts at zero.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

/// Initialization stream for one named layer, independent of construction order.
pub fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

#[derive(Debug, Clone)]
pub struct CstFormer {
    cfg: ModelConfig,
    pub encoder: Vec<ConvBlock>,
    pub blocks: Vec<CstBlock>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CstFormer {
    /// Registers all parameters in `store`; initialization depends only on `seed`
    /// and each parameter's name.
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.conv_filters;
        let first_in = if cfg.variant == Variant::Dca { 1 } else { cfg.in_channels };
        let encoder = cfg
            .pool_kernels()
            .iter()
            .enumerate()
            .map(|(i, &k)| ConvBlock::new(store, &format!("encoder.{i}"), if i == 0 { first_in } else { c }, c, k, cfg.pool_type.into(), seed))
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..cfg.n_cst_blocks)
            .map(|j| CstBlock::new(store, &format!("cst.{j}"), cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        let fc1 = Linear::new(store, "head.fc1", c * cfg.pooled_freq(), cfg.fc_hidden, &mut layer_rng(seed, "head.fc1"))?;
        let fc2 = Linear::new(store, "head.fc2", cfg.fc_hidden, cfg.output_dim(), &mut layer_rng(seed, "head.fc2"))?;
        // Small output layer keeps the early updates from silencing the hidden ReLUs.
        for v in store.get_mut(fc2.weight).value.data_mut() {
            *v = T::lit(v.as_f64() * OUTPUT_INIT_SCALE);
        }
        if let Some(b) = fc2.bias {
            store.get_mut(b).value.data_mut().fill(T::zero());
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            blocks,
            fc1,
            fc2,
        })
    }

    /// Fresh `f32` parameter store and model.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `x` is `(B, M, T, F)`; returns `(B, T/5, tracks·3·K)` in `(-1, 1)`.
    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<Var<'g, T>> {
        self.forward_impl(g, store, x, ctx, None)
    }

    /// As [`forward`](Self::forward), also returning the input shapes seen by
    /// each attention module and stage boundary.
    pub fn forward_traced<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<(Var<'g, T>, Vec<(String, Vec<usize>)>)> {
        let tr = ShapeTrace::default();
        let y = self.forward_impl(g, store, x, ctx, Some(&tr))?;
        Ok((y, tr.into_inner()))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.cfg;
        let bad = |detail: String| -> Result<()> { Err(TensorError::InvalidShape { op: "cst_former", detail }.into()) };
        let &[_, m, t, f] = shape else {
            return bad(format!("expected (B, M, T, F), got {shape:?}"));
        };
        if m != cfg.in_channels {
            return bad(format!("M = {m}, model expects {} input channels", cfg.in_channels));
        }
        if f != cfg.n_mels {
            return bad(format!("F = {f}, model expects {} mel bands", cfg.n_mels));
        }
        if t % POOL_T != 0 {
            return Err(SeldError::Config(format!("T = {t} is not divisible by the time pooling factor {POOL_T}")));
        }
        if cfg.variant == Variant::Ule && (t / POOL_T) % cfg.patch_t != 0 {
            return Err(SeldError::Config(format!("T′ = {} is not divisible by patch_t {}", t / POOL_T, cfg.patch_t)));
        }
        Ok(())
    }

    fn forward_impl<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx, tr: Option<&ShapeTrace>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let (b, m, t, f) = (shape[0], shape[1], shape[2], shape[3]);
        let dca = self.cfg.variant == Variant::Dca;
        let mut h = if dca { x.reshape(&[b * m, 1, t, f])? } else { x };
        trace(tr, || "encoder.in".into(), h.shape());
        for block in &self.encoder {
            h = block.forward(g, store, h, ctx)?;
        }
        trace(tr, || "encoder.out".into(), h.shape());
        for (j, block) in self.blocks.iter().enumerate() {
            trace(tr, || format!("cst.{j}"), h.shape());
            h = block.forward(g, store, h, ctx, tr)?;
        }
        let hs = h.shape();
        let (c, tp, fp) = (hs[1], hs[2], hs[3]);
        if dca {
            h = h.reshape(&[b, m, c * tp * fp])?.mean_axis(1)?.reshape(&[b, c, tp, fp])?;
        }
        let flat = h.permute(&[0, 2, 1, 3])?.reshape(&[b, tp, c * fp])?;
        trace(tr, || "head.in".into(), flat.shape());
        let y = self.fc2.forward(g, store, self.fc1.forward(g, store, flat)?.relu())?.tanh();
        Ok(y)
    }

    /// Inference on a batch of `(M, T, F)` feature tensors stacked as `(B, M, T, F)`.
    pub fn predict(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let y = self.forward(&g, store, g.input(x.clone()), &ForwardCtx::eval())?;
        let out = y.value().as_ref().clone();
        Ok(out)
    }
}

/// Trainable parameter count.
pub fn count_params<T: Float>(store: &ParamStore<T>) -> usize {
    store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum()
}

/// Trainable parameters whose names start with `prefix`.
pub fn count_params_with_prefix<T: Float>(store: &ParamStore<T>, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
        .map(|(_, p)| p.value.numel())
        .sum()
}
