//! Encoder conv blocks and the CST block (LPU → C/S/T attention → IRFFN).

use std::cell::RefCell;

use seld_autodiff::nn::{pool, BatchNorm2d, Conv2d, LayerNorm};
use seld_autodiff::{Float, ForwardCtx, Graph, MultiHeadAttention, ParamStore, PoolKind, Var};

use super::config::{ModelConfig, Variant};
use super::layer_rng;
use super::patches::{fold_patches, unfold_patches};
use crate::error::Result;

/// Records named intermediate shapes during a forward pass.
pub type ShapeTrace = RefCell<Vec<(String, Vec<usize>)>>;

pub(crate) fn trace(t: Option<&ShapeTrace>, name: impl FnOnce() -> String, shape: Vec<usize>) {
    if let Some(t) = t {
        t.borrow_mut().push((name(), shape));
    }
}

/// 3×3 conv → batch norm → ReLU → pool.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub pool: (usize, usize),
    pub kind: PoolKind,
}

impl ConvBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, pool: (usize, usize), kind: PoolKind, seed: u64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{prefix}.conv"), cin, cout, (3, 3), (1, 1), &mut layer_rng(seed, &format!("{prefix}.conv")))?,
            bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), cout)?,
            pool,
            kind,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<Var<'g, T>> {
        let y = self.bn.forward(g, store, self.conv.forward(g, store, x)?, ctx)?.relu();
        Ok(pool(y, self.pool, self.kind)?)
    }
}

/// Local perception unit: `x + dwconv3×3(x)`.
#[derive(Debug, Clone)]
pub struct Lpu {
    pub dw: Conv2d,
}

impl Lpu {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            dw: Conv2d::depthwise(store, &format!("{prefix}.dw"), channels, (3, 3), (1, 1), &mut layer_rng(seed, &format!("{prefix}.dw")))?,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.add(&self.dw.forward(g, store, x)?)?)
    }
}

/// Inverted residual feed-forward network with an outer residual.
#[derive(Debug, Clone)]
pub struct Irffn {
    pub expand: Conv2d,
    pub expand_bn: BatchNorm2d,
    pub dw: Conv2d,
    pub dw_bn: BatchNorm2d,
    pub project: Conv2d,
    pub project_bn: BatchNorm2d,
    pub dropout: f64,
}

impl Irffn {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize, ratio: usize, dropout: f64, seed: u64) -> Result<Self> {
        let hidden = channels * ratio;
        Ok(Self {
            expand: Conv2d::new(store, &format!("{prefix}.expand"), channels, hidden, (1, 1), (0, 0), &mut layer_rng(seed, &format!("{prefix}.expand")))?,
            expand_bn: BatchNorm2d::new(store, &format!("{prefix}.expand_bn"), hidden)?,
            dw: Conv2d::depthwise(store, &format!("{prefix}.dw"), hidden, (3, 3), (1, 1), &mut layer_rng(seed, &format!("{prefix}.dw")))?,
            dw_bn: BatchNorm2d::new(store, &format!("{prefix}.dw_bn"), hidden)?,
            project: Conv2d::new(store, &format!("{prefix}.project"), hidden, channels, (1, 1), (0, 0), &mut layer_rng(seed, &format!("{prefix}.project")))?,
            project_bn: BatchNorm2d::new(store, &format!("{prefix}.project_bn"), channels)?,
            dropout,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<Var<'g, T>> {
        let h = self.expand_bn.forward(g, store, self.expand.forward(g, store, x)?, ctx)?.gelu();
        let d = self.dw_bn.forward(g, store, self.dw.forward(g, store, h)?, ctx)?;
        let h = h.add(&d)?.gelu();
        let y = self.project_bn.forward(g, store, self.project.forward(g, store, h)?, ctx)?;
        Ok(x.add(&ctx.dropout(y, self.dropout)?)?)
    }
}

/// Pre-norm residual attention: `x + dropout(mhsa(ln(x)))` on `(batch, seq, embed)`.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    pub norm: LayerNorm,
    pub mhsa: MultiHeadAttention,
    pub dropout: f64,
}

impl AttentionSublayer {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, embed: usize, heads: usize, dropout: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{prefix}_norm"), embed)?,
            mhsa: MultiHeadAttention::new(store, &format!("{prefix}_mhsa"), embed, heads, dropout, &mut layer_rng(seed, &format!("{prefix}_mhsa")))?,
            dropout,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<Var<'g, T>> {
        let h = self.mhsa.forward(g, store, self.norm.forward(g, store, x)?, ctx)?;
        Ok(x.add(&ctx.dropout(h, self.dropout)?)?)
    }
}

/// Channel, spectral and temporal attention applied in that order.
#[derive(Debug, Clone)]
pub struct CstAttention {
    pub variant: Variant,
    /// Number of FoA feature channels folded into the batch (DCA only).
    pub m: usize,
    pub patch: (usize, usize),
    pub channel: Option<AttentionSublayer>,
    pub spectral: AttentionSublayer,
    pub temporal: AttentionSublayer,
}

impl CstAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let c = cfg.conv_filters;
        let channel = match cfg.variant {
            Variant::Dst => None,
            Variant::Dca => Some(AttentionSublayer::new(store, &format!("{prefix}.c"), c, cfg.heads, cfg.dropout, seed)?),
            Variant::Ule => Some(AttentionSublayer::new(store, &format!("{prefix}.c"), cfg.ule_embed(), cfg.heads, cfg.dropout, seed)?),
        };
        Ok(Self {
            variant: cfg.variant,
            m: cfg.in_channels,
            patch: (cfg.patch_t, cfg.patch_f),
            channel,
            spectral: AttentionSublayer::new(store, &format!("{prefix}.s"), c, cfg.heads, cfg.dropout, seed)?,
            temporal: AttentionSublayer::new(store, &format!("{prefix}.t"), c, cfg.heads, cfg.dropout, seed)?,
        })
    }

    /// `x` is `(N, C, T′, F′)`, with `N = B·M` for DCA.
    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx, tr: Option<&ShapeTrace>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let [n, c, t, f] = [shape[0], shape[1], shape[2], shape[3]];
        let x = match (&self.channel, self.variant) {
            (Some(ca), Variant::Ule) => {
                let u = unfold_patches(x, self.patch.0, self.patch.1)?;
                trace(tr, || "c_mhsa".into(), u.shape());
                fold_patches(ca.forward(g, store, u, ctx)?, [n, c, t, f], self.patch.0, self.patch.1)?
            }
            (Some(ca), Variant::Dca) => {
                let (b, m) = (n / self.m, self.m);
                let seq = x.reshape(&[b, m, c, t, f])?.permute(&[0, 3, 4, 1, 2])?.reshape(&[b * t * f, m, c])?;
                trace(tr, || "c_mhsa".into(), seq.shape());
                ca.forward(g, store, seq, ctx)?
                    .reshape(&[b, t, f, m, c])?
                    .permute(&[0, 3, 4, 1, 2])?
                    .reshape(&[n, c, t, f])?
            }
            _ => x,
        };
        let s = x.permute(&[0, 2, 3, 1])?.reshape(&[n * t, f, c])?;
        trace(tr, || "s_mhsa".into(), s.shape());
        let x = self.spectral.forward(g, store, s, ctx)?.reshape(&[n, t, f, c])?.permute(&[0, 3, 1, 2])?;
        let s = x.permute(&[0, 3, 2, 1])?.reshape(&[n * f, t, c])?;
        trace(tr, || "t_mhsa".into(), s.shape());
        Ok(self.temporal.forward(g, store, s, ctx)?.reshape(&[n, f, t, c])?.permute(&[0, 3, 2, 1])?)
    }
}

#[derive(Debug, Clone)]
pub struct CstBlock {
    pub lpu: Option<Lpu>,
    pub attention: CstAttention,
    pub irffn: Option<Irffn>,
}

impl CstBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let c = cfg.conv_filters;
        Ok(Self {
            lpu: cfg.use_cmt.then(|| Lpu::new(store, &format!("{prefix}.lpu"), c, seed)).transpose()?,
            attention: CstAttention::new(store, prefix, cfg, seed)?,
            irffn: cfg.use_cmt.then(|| Irffn::new(store, &format!("{prefix}.irffn"), c, cfg.ffn_ratio, cfg.dropout, seed)).transpose()?,
        })
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx, tr: Option<&ShapeTrace>) -> Result<Var<'g, T>> {
        let x = match &self.lpu {
            Some(l) => l.forward(g, store, x)?,
            None => x,
        };
        let x = self.attention.forward(g, store, x, ctx, tr)?;
        match &self.irffn {
            Some(f) => f.forward(g, store, x, ctx),
            None => Ok(x),
        }
    }
}
