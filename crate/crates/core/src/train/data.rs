use std::path::{Path, PathBuf};

use crate::audio::FoaClip;
use crate::cache::CachedClip;
use crate::error::{io_err, Result, SeldError};
use crate::events::EventList;
use crate::features::FeatureExtractor;
use crate::synth::{Manifest, MANIFEST_FILE};
use crate::target::{encode_target, segment, Segment, SegmentConfig};

/// One clip split into fixed-length segments.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub name: String,
    pub segments: Vec<Segment>,
    pub events: EventList,
}

impl ClipData {
    pub fn from_cached(clip: &CachedClip, num_classes: usize, seg: SegmentConfig) -> Result<Self> {
        Ok(Self {
            name: clip.name.clone(),
            segments: segment(&clip.features, &clip.events, num_classes, seg)?,
            events: clip.events.clone(),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub clips: Vec<ClipData>,
}

/// Reads a WAV + CSV pair and extracts features.
pub fn load_clip(name: &str, wav: &Path, csv: &Path, extractor: &FeatureExtractor, num_classes: usize) -> Result<CachedClip> {
    let audio = FoaClip::read_wav(wav)?;
    let events = EventList::read_csv(csv, num_classes)?;
    let features = extractor.extract(&audio)?;
    let n_labels = features.n_frames().div_ceil(SegmentConfig::default().label_ratio);
    let target = encode_target(&events, n_labels, num_classes)?;
    Ok(CachedClip {
        name: name.to_string(),
        features,
        target,
        events,
        feature_config: extractor.config().clone(),
    })
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

impl Dataset {
    /// Loads `*.feat` caches if present, otherwise the clips listed in the
    /// manifest, otherwise every `*.wav` with a same-named `*.csv`.
    pub fn load_clips(dir: impl AsRef<Path>, extractor: &FeatureExtractor, num_classes: usize) -> Result<Vec<CachedClip>> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(SeldError::Config(format!("data directory {} does not exist", dir.display())));
        }
        let feats = sorted_files(dir, "feat")?;
        if !feats.is_empty() {
            return feats.iter().map(CachedClip::load).collect();
        }
        let pairs: Vec<(String, PathBuf, PathBuf)> = if dir.join(MANIFEST_FILE).is_file() {
            let m = Manifest::load(dir)?;
            (0..m.clips.len()).map(|i| (m.clips[i].name.clone(), m.wav_path(dir, i), m.csv_path(dir, i))).collect()
        } else {
            sorted_files(dir, "wav")?
                .into_iter()
                .map(|w| {
                    let stem = w.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    (stem, w.clone(), w.with_extension("csv"))
                })
                .collect()
        };
        if pairs.is_empty() {
            return Err(SeldError::Config(format!("no clips (*.feat or *.wav + *.csv) found in {}", dir.display())));
        }
        pairs.iter().map(|(n, w, c)| load_clip(n, w, c, extractor, num_classes)).collect()
    }

    pub fn from_cached(clips: &[CachedClip], num_classes: usize, seg: SegmentConfig) -> Result<Self> {
        Ok(Self {
            clips: clips.iter().map(|c| ClipData::from_cached(c, num_classes, seg)).collect::<Result<_>>()?,
        })
    }

    pub fn load(dir: impl AsRef<Path>, extractor: &FeatureExtractor, num_classes: usize, seg: SegmentConfig) -> Result<Self> {
        Self::from_cached(&Self::load_clips(dir, extractor, num_classes)?, num_classes, seg)
    }

    pub fn n_segments(&self) -> usize {
        self.clips.iter().map(|c| c.segments.len()).sum()
    }
}
