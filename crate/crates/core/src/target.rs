//! Multi-ACCDOA targets and fixed-length segmentation.

use seld_autodiff::Tensor;

use crate::error::{Result, SeldError};
use crate::events::{Doa, EventList, NUM_TRACKS};
use crate::features::FeatureClip;

/// Active DoAs of one class in one label frame, in track order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassFrame {
    pub count: usize,
    pub doas: [Doa; NUM_TRACKS],
}

impl ClassFrame {
    pub fn active(&self) -> &[Doa] {
        &self.doas[..self.count]
    }
}

/// Event sets per (label frame, class).
///
/// The loss chooses the track assignment, so the set is stored rather than a
/// fixed 3-track layout; [`MultiAccdoaTarget::dense`] gives the canonical layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiAccdoaTarget {
    n_frames: usize,
    num_classes: usize,
    slots: Vec<ClassFrame>,
}

impl MultiAccdoaTarget {
    pub fn zeros(n_frames: usize, num_classes: usize) -> Self {
        Self {
            n_frames,
            num_classes,
            slots: vec![ClassFrame::default(); n_frames * num_classes],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, frame: usize, class: usize) -> &ClassFrame {
        &self.slots[frame * self.num_classes + class]
    }

    pub fn push(&mut self, frame: usize, class: usize, doa: Doa) -> Result<()> {
        let slot = &mut self.slots[frame * self.num_classes + class];
        if slot.count == NUM_TRACKS {
            return Err(SeldError::Capacity(format!(
                "more than {NUM_TRACKS} simultaneous events of class {class} in frame {frame}"
            )));
        }
        slot.doas[slot.count] = doa;
        slot.count += 1;
        Ok(())
    }

    /// `(T, 3 tracks, 3 axes, K)`: one event on all tracks, two as (a, a, b),
    /// three as (a, b, c).
    pub fn dense(&self) -> Tensor<f32> {
        let k = self.num_classes;
        let mut t = Tensor::zeros(vec![self.n_frames, NUM_TRACKS, 3, k]);
        for f in 0..self.n_frames {
            for c in 0..k {
                let slot = self.get(f, c);
                let tracks: [usize; 3] = match slot.count {
                    0 => continue,
                    1 => [0, 0, 0],
                    2 => [0, 0, 1],
                    _ => [0, 1, 2],
                };
                for (track, &src) in tracks.iter().enumerate() {
                    for axis in 0..3 {
                        t.set(&[f, track, axis, c], slot.doas[src][axis] as f32);
                    }
                }
            }
        }
        t
    }

    /// Frames `[start, start + len)`, zero beyond the end.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let mut out = Self::zeros(len, self.num_classes);
        for f in 0..len.min(self.n_frames.saturating_sub(start)) {
            let src = (start + f) * self.num_classes;
            out.slots[f * self.num_classes..(f + 1) * self.num_classes].copy_from_slice(&self.slots[src..src + self.num_classes]);
        }
        out
    }

    /// Cache representation: `count (T, K)` and `doas (T, K, 3, 3)`.
    pub fn to_tensors(&self) -> (Tensor<f32>, Tensor<f32>) {
        let counts = self.slots.iter().map(|s| s.count as f32).collect();
        let doas = self.slots.iter().flat_map(|s| s.doas.iter().flatten().map(|&v| v as f32)).collect();
        (
            Tensor::new(vec![self.n_frames, self.num_classes], counts).expect("count shape"),
            Tensor::new(vec![self.n_frames, self.num_classes, NUM_TRACKS, 3], doas).expect("doa shape"),
        )
    }

    pub fn from_tensors(count: &Tensor<f32>, doas: &Tensor<f32>) -> Result<Self> {
        let &[n_frames, num_classes] = count.shape() else {
            return Err(SeldError::Format(format!("target count must be 2-D, got {:?}", count.shape())));
        };
        if doas.shape() != [n_frames, num_classes, NUM_TRACKS, 3] {
            return Err(SeldError::Format(format!("target doas shape {:?} inconsistent with counts", doas.shape())));
        }
        let mut out = Self::zeros(n_frames, num_classes);
        for (i, slot) in out.slots.iter_mut().enumerate() {
            let n = count.data()[i];
            if !(0.0..=NUM_TRACKS as f32).contains(&n) || n.fract() != 0.0 {
                return Err(SeldError::Format(format!("invalid event count {n}")));
            }
            slot.count = n as usize;
            for (tr, d) in slot.doas.iter_mut().enumerate() {
                for (a, v) in d.iter_mut().enumerate() {
                    *v = doas.data()[(i * NUM_TRACKS + tr) * 3 + a] as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Target for `n_frames` label frames; events at or beyond `n_frames` are an error.
pub fn encode_target(events: &EventList, n_frames: usize, num_classes: usize) -> Result<MultiAccdoaTarget> {
    let mut t = MultiAccdoaTarget::zeros(n_frames, num_classes);
    for e in events.events() {
        if e.frame >= n_frames {
            return Err(SeldError::Events(format!("event at frame {} but only {n_frames} label frames", e.frame)));
        }
        if e.class >= num_classes {
            return Err(SeldError::Events(format!("class {} out of range (K={num_classes})", e.class)));
        }
        t.push(e.frame, e.class, e.doa())?;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentConfig {
    pub feature_frames: usize,
    /// Feature frames per label frame.
    pub label_ratio: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            feature_frames: 250,
            label_ratio: 5,
        }
    }
}

impl SegmentConfig {
    pub fn label_frames(&self) -> usize {
        self.feature_frames / self.label_ratio
    }
}

/// One fixed-length training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// `(7, feature_frames, F)`, zero-padded past `valid_frames`.
    pub features: Tensor<f32>,
    pub target: MultiAccdoaTarget,
    pub events: EventList,
    pub valid_frames: usize,
}

/// Splits a clip into non-overlapping segments; the last is zero-padded.
pub fn segment(clip: &FeatureClip, events: &EventList, num_classes: usize, cfg: SegmentConfig) -> Result<Vec<Segment>> {
    if cfg.label_ratio == 0 || cfg.feature_frames % cfg.label_ratio != 0 {
        return Err(SeldError::Config(format!(
            "segment length {} is not a multiple of label ratio {}",
            cfg.feature_frames, cfg.label_ratio
        )));
    }
    let shape = clip.features.shape();
    let (m, t_n, f) = (shape[0], shape[1], shape[2]);
    let n_labels = t_n.div_ceil(cfg.label_ratio);
    let target = encode_target(events, n_labels, num_classes)?;
    let seg = cfg.feature_frames;
    let lseg = cfg.label_frames();
    let src = clip.features.data();
    let mut out = Vec::new();
    for s in 0..t_n.div_ceil(seg) {
        let start = s * seg;
        let valid = seg.min(t_n - start);
        let mut data = vec![0f32; m * seg * f];
        for ch in 0..m {
            let from = (ch * t_n + start) * f;
            data[ch * seg * f..ch * seg * f + valid * f].copy_from_slice(&src[from..from + valid * f]);
        }
        out.push(Segment {
            features: Tensor::new(vec![m, seg, f], data)?,
            target: target.window(s * lseg, lseg),
            events: events.window(s * lseg, (s + 1) * lseg),
            valid_frames: valid,
        });
    }
    Ok(out)
}
