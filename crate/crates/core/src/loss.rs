//! Class-wise auxiliary-duplicated permutation-invariant MSE (ADPIT).
//!
//! Candidate track assignments per (frame, class), by event count:
//!
//! | events | patterns | index |
//! |--------|----------|-------|
//! | 0 or 1 | (a, a, a), zero when empty | 0 |
//! | 2 | (a,a,b) (a,b,a) (b,a,a) (a,b,b) (b,a,b) (b,b,a) | 1–6 |
//! | 3 | (a,b,c) (a,c,b) (b,a,c) (b,c,a) (c,a,b) (c,b,a) | 7–12 |
//!
//! The cheapest pattern under the current prediction is the target; ties go
//! to the lowest index. The selection carries no gradient.

use seld_autodiff::{Float, Tensor, TensorError, Var};

use crate::error::{Result, SeldError};
use crate::events::{Doa, NUM_TRACKS};
use crate::target::MultiAccdoaTarget;

pub const N_PATTERNS: usize = 13;

const PATTERNS: [[usize; 3]; N_PATTERNS] = [
    [0, 0, 0],
    [0, 0, 1],
    [0, 1, 0],
    [1, 0, 0],
    [0, 1, 1],
    [1, 0, 1],
    [1, 1, 0],
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Pattern indices valid for a class-frame with `count` events.
pub fn candidate_patterns(count: usize) -> std::ops::Range<usize> {
    match count {
        0 | 1 => 0..1,
        2 => 1..7,
        _ => 7..13,
    }
}

/// Event index placed on each track by `pattern`.
pub fn pattern_tracks(pattern: usize) -> [usize; 3] {
    PATTERNS[pattern]
}

/// Three-track target for one class-frame under `pattern`.
pub fn pattern_target(active: &[Doa], pattern: usize) -> [Doa; NUM_TRACKS] {
    if active.is_empty() {
        return [[0.0; 3]; NUM_TRACKS];
    }
    PATTERNS[pattern].map(|e| active[e])
}

fn shape_check(shape: &[usize], targets: &[MultiAccdoaTarget]) -> Result<(usize, usize, usize)> {
    let bad = |d: String| -> Result<(usize, usize, usize)> { Err(TensorError::InvalidShape { op: "adpit_loss", detail: d }.into()) };
    let (b, t, k) = match *shape {
        [b, t, d] if d % (3 * NUM_TRACKS) == 0 => (b, t, d / (3 * NUM_TRACKS)),
        [b, t, NUM_TRACKS, 3, k] => (b, t, k),
        _ => return bad(format!("prediction must be (B, T, {NUM_TRACKS}·3·K) or (B, T, {NUM_TRACKS}, 3, K), got {shape:?}")),
    };
    if b != targets.len() {
        return bad(format!("batch of {b} predictions but {} targets", targets.len()));
    }
    for tg in targets {
        if tg.n_frames() != t || tg.num_classes() != k {
            return bad(format!(
                "target is ({}, K={}) but prediction is ({t}, K={k})",
                tg.n_frames(),
                tg.num_classes()
            ));
        }
    }
    Ok((b, t, k))
}

/// Selected pattern per (batch, frame, class) and the matching dense target.
pub fn select_targets<T: Float>(pred: &Tensor<T>, targets: &[MultiAccdoaTarget]) -> Result<(Tensor<T>, Vec<u8>)> {
    let (b_n, t_n, k) = shape_check(pred.shape(), targets)?;
    let p = pred.data();
    let mut out = vec![T::zero(); p.len()];
    let mut chosen = Vec::with_capacity(b_n * t_n * k);
    let idx = |b: usize, t: usize, tr: usize, a: usize, c: usize| (((b * t_n + t) * NUM_TRACKS + tr) * 3 + a) * k + c;
    for (b, tg) in targets.iter().enumerate() {
        for t in 0..t_n {
            for c in 0..k {
                let slot = tg.get(t, c);
                if slot.count > NUM_TRACKS {
                    return Err(SeldError::Capacity(format!("{} events in one class-frame", slot.count)));
                }
                let active = slot.active();
                let mut best = (f64::INFINITY, 0usize, [[0.0; 3]; NUM_TRACKS]);
                for pat in candidate_patterns(slot.count) {
                    let cand = pattern_target(active, pat);
                    let mut cost = 0.0;
                    for (tr, d) in cand.iter().enumerate() {
                        for (a, &v) in d.iter().enumerate() {
                            let e = p[idx(b, t, tr, a, c)].as_f64() - v;
                            cost += e * e;
                        }
                    }
                    if cost < best.0 {
                        best = (cost, pat, cand);
                    }
                }
                chosen.push(best.1 as u8);
                for (tr, d) in best.2.iter().enumerate() {
                    for (a, &v) in d.iter().enumerate() {
                        out[idx(b, t, tr, a, c)] = T::lit(v);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(pred.shape().to_vec(), out)?, chosen))
}

/// Mean over batch, frames and classes of the per-class-frame 9-element MSE
/// under the cheapest valid pattern.
pub fn adpit_loss<'g, T: Float>(pred: Var<'g, T>, targets: &[MultiAccdoaTarget]) -> Result<Var<'g, T>> {
    let (target, _) = select_targets(&pred.value(), targets)?;
    let target = pred.graph().input(target);
    Ok(pred.mse(&target)?)
}

/// Loss value without building a graph.
pub fn adpit_value<T: Float>(pred: &Tensor<T>, targets: &[MultiAccdoaTarget]) -> Result<f64> {
    let (target, _) = select_targets(pred, targets)?;
    let n = pred.numel().max(1);
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2)).sum::<f64>() / n as f64)
}
