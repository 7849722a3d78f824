//! Multi-ACCDOA decoding and the SELD metrics (ER, F, LE, LR, SELD score).
//!
//! Scoring works on 1 s segments. Within a segment, each (class, track) of the
//! reference and of the prediction becomes one event whose DoA is the mean of
//! its frame DoAs. Per class, predictions are matched to references by minimum
//! total angular error. A match within the threshold is a true positive; a
//! farther match counts as one false positive and one false negative.
//! Unmatched events are false negatives or false positives.
//!
//! Conventions: LE is the mean over all matched pairs (no threshold) and is
//! 180° with `le_undefined` set when events exist but nothing was matched.
//! F is macro-averaged over classes with any activity, LR over classes with
//! references; both default to 1 when no class qualifies. ER divides by
//! `max(N_ref, 1)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use seld_autodiff::{Float, Tensor, TensorError};

use crate::error::Result;
use crate::events::{vector_to_doa, Doa, Event, EventList, NUM_TRACKS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Norm above which a track is active.
    pub activity_threshold: f64,
    /// Tracks of one class-frame closer than this are merged, degrees.
    pub merge_deg: f64,
    /// Location-dependent detection threshold, degrees.
    pub match_deg: f64,
    /// Label frames per scoring segment.
    pub segment_frames: usize,
    pub num_classes: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            activity_threshold: 0.5,
            merge_deg: 15.0,
            match_deg: 20.0,
            segment_frames: 10,
            num_classes: crate::events::NUM_CLASSES,
        }
    }
}

/// Angle between two direction vectors in degrees; exactly 0 for equal inputs.
pub fn angular_error(u: Doa, v: Doa) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt().atan2(dot).to_degrees()
}

fn normalize(v: Doa) -> Doa {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        return v;
    }
    [v[0] / n, v[1] / n, v[2] / n]
}

/// One decoded event in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub doa: Doa,
    pub confidence: f64,
}

/// Detections per label frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodedEvents {
    pub frames: Vec<Vec<Detection>>,
}

impl DecodedEvents {
    pub fn is_empty(&self) -> bool {
        self.frames.iter().all(Vec::is_empty)
    }

    /// Event list with tracks numbered per class-frame in detection order.
    pub fn to_event_list(&self) -> EventList {
        let mut rows = Vec::new();
        for (frame, dets) in self.frames.iter().enumerate() {
            let mut next: BTreeMap<usize, usize> = BTreeMap::new();
            for d in dets {
                let track = next.entry(d.class).or_default();
                let (azimuth, elevation) = vector_to_doa(d.doa);
                rows.push(Event {
                    frame,
                    class: d.class,
                    track: *track,
                    azimuth,
                    elevation,
                });
                *track += 1;
            }
        }
        let mut list = EventList::new();
        for r in rows {
            list.push(r);
        }
        list.sort();
        list
    }
}

/// Decodes one clip's `(T, tracks·3·K)` or `(T, tracks, 3, K)` output.
pub fn decode<T: Float>(pred: &Tensor<T>, cfg: &MetricsConfig) -> Result<DecodedEvents> {
    let (t_n, k) = match *pred.shape() {
        [t, d] if d % (3 * NUM_TRACKS) == 0 => (t, d / (3 * NUM_TRACKS)),
        [t, NUM_TRACKS, 3, k] => (t, k),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "decode",
                detail: format!("expected (T, {NUM_TRACKS}·3·K), got {:?}", pred.shape()),
            }
            .into())
        }
    };
    let p = pred.data();
    let mut frames = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let mut dets = Vec::new();
        for c in 0..k {
            // (unit-direction sum, norm sum, members)
            let mut clusters: Vec<(Doa, f64, usize)> = Vec::new();
            for tr in 0..NUM_TRACKS {
                let v: Doa = std::array::from_fn(|a| p[((t * NUM_TRACKS + tr) * 3 + a) * k + c].as_f64());
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm <= cfg.activity_threshold {
                    continue;
                }
                let u = [v[0] / norm, v[1] / norm, v[2] / norm];
                match clusters.iter_mut().find(|(s, _, _)| angular_error(normalize(*s), u) < cfg.merge_deg) {
                    Some(cl) => {
                        cl.0 = [cl.0[0] + u[0], cl.0[1] + u[1], cl.0[2] + u[2]];
                        cl.1 += norm;
                        cl.2 += 1;
                    }
                    None => clusters.push((u, norm, 1)),
                }
            }
            dets.extend(clusters.into_iter().map(|(s, n, m)| Detection {
                class: c,
                doa: normalize(s),
                confidence: n / m as f64,
            }));
        }
        frames.push(dets);
    }
    Ok(DecodedEvents { frames })
}

/// Minimum-cost assignment on a rectangular cost matrix (Kuhn–Munkres with
/// potentials). Returns `(row, col)` pairs, `min(rows, cols)` of them.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        return pairs;
    }
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_ref: usize,
    pub n_pred: usize,
    pub matched: usize,
    pub le_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub er: f64,
    pub f: f64,
    pub le: f64,
    pub lr: f64,
    pub seld_score: f64,
    /// LE had no matched pairs to average and was set to 180°.
    pub le_undefined: bool,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
    pub per_class: Vec<ClassCounts>,
}

pub fn seld_score(er: f64, f: f64, le: f64, lr: f64) -> f64 {
    (er + (1.0 - f) + le / 180.0 + (1.0 - lr)) / 4.0
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Single-line summary.
    pub fn summary(&self) -> String {
        format!(
            "ER {:.4}  F {:.4}  LE {:.2}{}  LR {:.4}  SELD {:.4}",
            self.er,
            self.f,
            self.le,
            if self.le_undefined { " (undefined)" } else { "" },
            self.lr,
            self.seld_score
        )
    }
}

/// Per-segment, per-class events: (class, track) → mean unit DoA.
fn segment_events(list: &EventList, seg: usize, n_seg: usize, k: usize) -> Vec<Vec<Vec<Doa>>> {
    let mut acc: Vec<BTreeMap<(usize, usize), Doa>> = vec![BTreeMap::new(); n_seg];
    for e in list.events() {
        if e.class >= k {
            continue;
        }
        let d = e.doa();
        let s = acc[e.frame / seg].entry((e.class, e.track)).or_insert([0.0; 3]);
        for a in 0..3 {
            s[a] += d[a];
        }
    }
    acc.into_iter()
        .map(|m| {
            let mut per_class = vec![Vec::new(); k];
            for ((c, _), s) in m {
                per_class[c].push(normalize(s));
            }
            per_class
        })
        .collect()
}

/// Scores `pred` against `reference`.
pub fn evaluate(pred: &EventList, reference: &EventList, cfg: &MetricsConfig) -> MetricsReport {
    evaluate_with(pred, reference, cfg, hungarian)
}

/// [`evaluate`] with a caller-supplied assignment solver.
pub fn evaluate_with(pred: &EventList, reference: &EventList, cfg: &MetricsConfig, matcher: impl Fn(&[Vec<f64>]) -> Vec<(usize, usize)>) -> MetricsReport {
    let k = cfg.num_classes;
    let seg = cfg.segment_frames.max(1);
    let n_frames = pred.n_frames().max(reference.n_frames());
    let n_seg = n_frames.div_ceil(seg);
    let refs = segment_events(reference, seg, n_seg, k);
    let preds = segment_events(pred, seg, n_seg, k);
    let mut per_class = vec![ClassCounts::default(); k];
    let (mut subs, mut dels, mut ins, mut n_ref) = (0, 0, 0, 0);
    let (mut le_sum, mut le_n) = (0.0, 0usize);
    for s in 0..n_seg {
        let (mut seg_fn, mut seg_fp) = (0, 0);
        for c in 0..k {
            let (r, p) = (&refs[s][c], &preds[s][c]);
            let counts = &mut per_class[c];
            counts.n_ref += r.len();
            counts.n_pred += p.len();
            n_ref += r.len();
            let cost: Vec<Vec<f64>> = r.iter().map(|&rd| p.iter().map(|&pd| angular_error(rd, pd)).collect()).collect();
            let pairs = if r.is_empty() || p.is_empty() { Vec::new() } else { matcher(&cost) };
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for &(i, j) in &pairs {
                let err = cost[i][j];
                counts.le_sum += err;
                counts.matched += 1;
                le_sum += err;
                le_n += 1;
                if err <= cfg.match_deg {
                    tp += 1;
                } else {
                    fp += 1;
                    fn_ += 1;
                }
            }
            fn_ += r.len() - pairs.len();
            fp += p.len() - pairs.len();
            counts.tp += tp;
            counts.fp += fp;
            counts.fn_ += fn_;
            seg_fn += fn_;
            seg_fp += fp;
        }
        let sub = seg_fn.min(seg_fp);
        subs += sub;
        dels += seg_fn - sub;
        ins += seg_fp - sub;
    }
    let er = (subs + dels + ins) as f64 / n_ref.max(1) as f64;
    let f_scores: Vec<f64> = per_class
        .iter()
        .filter(|c| c.tp + c.fp + c.fn_ > 0)
        .map(|c| 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
        .collect();
    let f = if f_scores.is_empty() { 1.0 } else { f_scores.iter().sum::<f64>() / f_scores.len() as f64 };
    let lr_scores: Vec<f64> = per_class.iter().filter(|c| c.n_ref > 0).map(|c| c.matched as f64 / c.n_ref as f64).collect();
    let lr = if lr_scores.is_empty() { 1.0 } else { lr_scores.iter().sum::<f64>() / lr_scores.len() as f64 };
    let any = per_class.iter().any(|c| c.n_ref + c.n_pred > 0);
    let (le, le_undefined) = match (le_n, any) {
        (0, true) => (180.0, true),
        (0, false) => (0.0, false),
        _ => (le_sum / le_n as f64, false),
    };
    MetricsReport {
        er,
        f,
        le,
        lr,
        seld_score: seld_score(er, f, le, lr),
        le_undefined,
        substitutions: subs,
        deletions: dels,
        insertions: ins,
        n_ref,
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_error_basics() {
        assert_eq!(angular_error([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]), 0.0);
        assert!((angular_error([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]) - 180.0).abs() < 1e-12);
        assert!((angular_error([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian(&[vec![4.0, 1.0], vec![2.0, 3.0]]), vec![(0, 1), (1, 0)]);
        assert_eq!(hungarian(&[vec![5.0], vec![1.0], vec![3.0]]), vec![(1, 0)]);
        assert_eq!(hungarian(&[vec![5.0, 1.0, 3.0]]), vec![(0, 1)]);
    }

    #[test]
    fn zero_prediction_decodes_to_nothing() {
        let d = decode(&Tensor::<f32>::zeros(vec![5, 117]), &MetricsConfig::default()).unwrap();
        assert!(d.is_empty());
    }
}
