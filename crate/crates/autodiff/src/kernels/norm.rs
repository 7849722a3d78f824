//! Batch and layer normalization over strided groups.

use crate::scalar::Float;

/// Per-channel statistics for a `(B, C, rest...)` tensor.
pub fn channel_stats<T: Float>(x: &[T], batch: usize, channels: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((batch * inner) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * channels + c) * inner..][..inner].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..batch {
            for &e in &x[(b * channels + c) * inner..][..inner] {
                v += (e - m) * (e - m);
            }
        }
        mean[c] = m;
        var[c] = v / count;
    }
    (mean, var)
}

/// Normalizes with given statistics; returns `(y, xhat)`.
#[allow(clippy::too_many_arguments)]
pub fn channel_normalize<T: Float>(
    x: &[T],
    batch: usize,
    channels: usize,
    inner: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let o = (b * channels + c) * inner;
            for i in o..o + inner {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = h * gamma[c] + beta[c];
            }
        }
    }
    (y, xhat)
}

pub struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward of per-channel normalization. With `batch_stats` the mean and
/// variance are functions of `x`; otherwise they are constants (eval mode).
#[allow(clippy::too_many_arguments)]
pub fn channel_norm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    batch: usize,
    channels: usize,
    inner: usize,
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let n = T::lit((batch * inner) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for b in 0..batch {
            let o = (b * channels + c) * inner;
            for i in o..o + inner {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = gamma[c] * inv_std[c];
        for b in 0..batch {
            let o = (b * channels + c) * inner;
            for i in o..o + inner {
                dx[i] = if batch_stats {
                    k * (dy[i] - sum_dy / n - xhat[i] * sum_dy_xhat / n)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

/// Layer norm over contiguous rows of length `d`; returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<T: Float>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let m = row.iter().copied().sum::<T>() / dn;
        let v = row.iter().map(|&e| (e - m) * (e - m)).sum::<T>() / dn;
        let is = T::one() / (v + eps).sqrt();
        inv[r] = is;
        for i in 0..d {
            let h = (row[i] - m) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, inv)
}

pub fn layer_norm_backward<T: Float>(dy: &[T], xhat: &[T], inv: &[T], gamma: &[T], d: usize) -> NormGrads<T> {
    let rows = dy.len() / d;
    let dn = T::lit(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for r in 0..rows {
        let o = r * d;
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for i in 0..d {
            let g = dy[o + i] * gamma[i];
            s1 += g;
            s2 += g * xhat[o + i];
            dgamma[i] += dy[o + i] * xhat[o + i];
            dbeta[i] += dy[o + i];
        }
        for i in 0..d {
            let g = dy[o + i] * gamma[i];
            dx[o + i] = inv[r] * (g - s1 / dn - xhat[o + i] * s2 / dn);
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
