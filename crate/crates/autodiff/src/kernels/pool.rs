use crate::error::{shape_err, Result};
use crate::scalar::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Max,
    Avg,
}

/// Non-overlapping pooling geometry: stride equals kernel, trailing remainder dropped.
#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], kernel: (usize, usize)) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err("pool2d", format!("input must be (B,C,H,W), got {:?}", input)));
        }
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 {
            return Err(shape_err("pool2d", "kernel extents must be >= 1"));
        }
        let (h, w) = (input[2], input[3]);
        if h < kh {
            return Err(shape_err("pool2d", format!("height {h} smaller than kernel {kh}")));
        }
        if w < kw {
            return Err(shape_err("pool2d", format!("width {w} smaller than kernel {kw}")));
        }
        Ok(Self {
            planes: input[0] * input[1],
            h,
            w,
            kh,
            kw,
            ho: h / kh,
            wo: w / kw,
        })
    }
}

/// Returns pooled values and, for max pooling, the flat input index of each winner.
pub fn pool_forward<T: Float>(x: &[T], g: &PoolGeom, kind: PoolKind) -> (Vec<T>, Vec<usize>) {
    let n = g.planes * g.ho * g.wo;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(if kind == PoolKind::Max { n } else { 0 });
    let inv = T::one() / T::lit((g.kh * g.kw) as f64);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                let mut acc = T::zero();
                for i in 0..g.kh {
                    let row = base + (oh * g.kh + i) * g.w + ow * g.kw;
                    for j in 0..g.kw {
                        let v = x[row + j];
                        // first maximum wins ties
                        if v > best {
                            best = v;
                            best_i = row + j;
                        }
                        acc += v;
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        arg.push(best_i);
                    }
                    PoolKind::Avg => out.push(acc * inv),
                }
            }
        }
    }
    (out, arg)
}

pub fn pool_backward<T: Float>(
    dy: &[T],
    g: &PoolGeom,
    kind: PoolKind,
    argmax: &[usize],
    in_len: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    match kind {
        PoolKind::Max => {
            for (&i, &gy) in argmax.iter().zip(dy) {
                dx[i] += gy;
            }
        }
        PoolKind::Avg => {
            let inv = T::one() / T::lit((g.kh * g.kw) as f64);
            let mut k = 0;
            for p in 0..g.planes {
                let base = p * g.h * g.w;
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        let gy = dy[k] * inv;
                        k += 1;
                        for i in 0..g.kh {
                            let row = base + (oh * g.kh + i) * g.w + ow * g.kw;
                            for v in &mut dx[row..row + g.kw] {
                                *v += gy;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
