//! Per-clip feature cache in the shared tensor archive format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use seld_autodiff::Archive;

use crate::error::{Result, SeldError};
use crate::events::EventList;
use crate::features::{FeatureClip, FeatureConfig};
use crate::target::MultiAccdoaTarget;

const KIND: &str = "feature-cache";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheMeta {
    kind: String,
    clip: String,
    frame_hop_s: f64,
    features: FeatureConfig,
    events_csv: String,
}

/// Cached features, label-rate target and the reference events of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedClip {
    pub name: String,
    pub features: FeatureClip,
    pub target: MultiAccdoaTarget,
    pub events: EventList,
    pub feature_config: FeatureConfig,
}

impl CachedClip {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CacheMeta {
            kind: KIND.into(),
            clip: self.name.clone(),
            frame_hop_s: self.features.frame_hop_s,
            features: self.feature_config.clone(),
            events_csv: self.events.to_csv_string(),
        };
        let mut ar = Archive::new(serde_json::to_string(&meta).map_err(|e| SeldError::Format(e.to_string()))?);
        let (count, doas) = self.target.to_tensors();
        ar.push("features", self.features.features.clone());
        ar.push("target.count", count);
        ar.push("target.doas", doas);
        Ok(ar.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ar = Archive::<f32>::load(path)?;
        let meta: CacheMeta = serde_json::from_str(&ar.meta).map_err(|e| SeldError::Format(format!("{}: {e}", path.display())))?;
        if meta.kind != KIND {
            return Err(SeldError::Format(format!("{}: not a feature cache (kind `{}`)", path.display(), meta.kind)));
        }
        let entry = |name: &str| {
            ar.get(name)
                .ok_or_else(|| SeldError::Format(format!("{}: missing entry `{name}`", path.display())))
        };
        let features = entry("features")?.clone();
        let target = MultiAccdoaTarget::from_tensors(entry("target.count")?, entry("target.doas")?)?;
        let events = EventList::parse_csv(&meta.events_csv, &path.display().to_string())?;
        Ok(Self {
            name: meta.clip,
            features: FeatureClip {
                features,
                frame_hop_s: meta.frame_hop_s,
            },
            target,
            events,
            feature_config: meta.features,
        })
    }
}
