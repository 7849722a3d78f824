//! Multi-head scaled dot-product self-attention without positional encoding.

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::nn::{ForwardCtx, Linear};
use crate::param::ParamStore;
use crate::scalar::Float;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub embed: usize,
    pub heads: usize,
    /// Dropout applied to the attention weights.
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, embed: usize, heads: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(TensorError::Config(format!(
                "{prefix}: embedding dimension {embed} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: Linear::new(store, &format!("{prefix}.q_proj"), embed, embed, rng)?,
            k_proj: Linear::new(store, &format!("{prefix}.k_proj"), embed, embed, rng)?,
            v_proj: Linear::new(store, &format!("{prefix}.v_proj"), embed, embed, rng)?,
            out_proj: Linear::new(store, &format!("{prefix}.out_proj"), embed, embed, rng)?,
            embed,
            heads,
            dropout,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * self.q_proj.num_params()
    }

    /// `x` is `(batch, seq, embed)`; output has the same shape.
    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, ctx: &ForwardCtx) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let &[n, s, e] = shape.as_slice() else {
            return Err(shape_err("mhsa", format!("input must be (batch, seq, embed), got {:?}", shape)));
        };
        if e != self.embed {
            return Err(shape_err("mhsa", format!("embedding dimension {e} != configured {}", self.embed)));
        }
        let (h, d) = (self.heads, self.embed / self.heads);
        let split = |v: Var<'g, T>| -> Result<Var<'g, T>> { v.reshape(&[n, s, h, d])?.permute(&[0, 2, 1, 3])?.reshape(&[n * h, s, d]) };
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let q = split(self.q_proj.forward(g, store, x)?.scale(scale))?;
        let k = split(self.k_proj.forward(g, store, x)?)?;
        let v = split(self.v_proj.forward(g, store, x)?)?;
        let attn = q.bmm(&k, false, true)?.softmax_last()?;
        let attn = ctx.dropout(attn, self.dropout)?;
        let merged = attn
            .bmm(&v, false, false)?
            .reshape(&[n, h, s, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, s, e])?;
        self.out_proj.forward(g, store, merged)
    }
}
