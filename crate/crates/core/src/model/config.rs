use serde::{Deserialize, Serialize};

use seld_autodiff::PoolKind;

use crate::error::{Result, SeldError};

/// Where channel attention gets its embedding from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Spectral and temporal attention only.
    Dst,
    /// Input channels encoded separately, then attended as a sequence.
    Dca,
    /// Unfolded T-F patches as the channel embedding.
    Ule,
}

/// Placement of the (5,2), (1,2), (1,1) pooling kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Front,
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolType {
    #[default]
    Max,
    Avg,
}

impl From<PoolType> for PoolKind {
    fn from(p: PoolType) -> Self {
        match p {
            PoolType::Max => PoolKind::Max,
            PoolType::Avg => PoolKind::Avg,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dst" => Ok(Self::Dst),
            "dca" => Ok(Self::Dca),
            "ule" => Ok(Self::Ule),
            _ => Err(SeldError::Config(format!("unknown variant `{s}` (expected dst, dca or ule)"))),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "front" => Ok(Self::Front),
            "middle" => Ok(Self::Middle),
            _ => Err(SeldError::Config(format!("unknown pooling `{s}` (expected front or middle)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub use_cmt: bool,
    pub pooling: Pooling,
    pub pool_type: PoolType,
    pub in_channels: usize,
    pub n_mels: usize,
    pub conv_filters: usize,
    pub n_cst_blocks: usize,
    pub heads: usize,
    pub patch_t: usize,
    pub patch_f: usize,
    pub n_classes: usize,
    pub n_tracks: usize,
    pub fc_hidden: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
    /// Feature frames per training segment.
    pub seg_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ule,
            use_cmt: true,
            pooling: Pooling::Front,
            pool_type: PoolType::Max,
            in_channels: 7,
            n_mels: 64,
            conv_filters: 64,
            n_cst_blocks: 2,
            heads: 8,
            patch_t: 10,
            patch_f: 4,
            n_classes: 13,
            n_tracks: 3,
            fc_hidden: 128,
            ffn_ratio: 4,
            dropout: 0.05,
            seg_frames: 250,
        }
    }
}

/// Total pooling factor in time and frequency.
pub const POOL_T: usize = 5;
pub const POOL_F: usize = 4;

impl ModelConfig {
    pub fn with(variant: Variant, use_cmt: bool, pooling: Pooling) -> Self {
        Self {
            variant,
            use_cmt,
            pooling,
            ..Self::default()
        }
    }

    /// Per-block pooling kernels.
    pub fn pool_kernels(&self) -> [(usize, usize); 3] {
        match self.pooling {
            Pooling::Front => [(5, 2), (1, 2), (1, 1)],
            Pooling::Middle => [(1, 1), (1, 2), (5, 2)],
        }
    }

    pub fn label_frames(&self) -> usize {
        self.seg_frames / POOL_T
    }

    pub fn pooled_freq(&self) -> usize {
        self.n_mels / POOL_F
    }

    pub fn output_dim(&self) -> usize {
        self.n_tracks * 3 * self.n_classes
    }

    pub fn ule_embed(&self) -> usize {
        self.patch_t * self.patch_f
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SeldError::Config(m));
        if self.seg_frames % POOL_T != 0 || self.seg_frames == 0 {
            return fail(format!("seg_frames {} must be a positive multiple of {POOL_T}", self.seg_frames));
        }
        if self.n_mels % POOL_F != 0 || self.n_mels == 0 {
            return fail(format!("n_mels {} must be a positive multiple of {POOL_F}", self.n_mels));
        }
        if self.heads == 0 || self.conv_filters % self.heads != 0 {
            return fail(format!("conv_filters {} not divisible by {} heads", self.conv_filters, self.heads));
        }
        if self.variant == Variant::Ule {
            let (t, f) = (self.label_frames(), self.pooled_freq());
            if self.patch_t == 0 || self.patch_f == 0 || t % self.patch_t != 0 || f % self.patch_f != 0 {
                return fail(format!(
                    "patch ({}, {}) does not tile the pooled map ({t}, {f})",
                    self.patch_t, self.patch_f
                ));
            }
            if self.ule_embed() % self.heads != 0 {
                return fail(format!("ULE embedding {} not divisible by {} heads", self.ule_embed(), self.heads));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_tracks == 0 || self.n_classes == 0 || self.fc_hidden == 0 || self.ffn_ratio == 0 || self.in_channels == 0 {
            return fail("zero-sized model dimension".into());
        }
        Ok(())
    }

    /// Every variant × CMT × pooling combination.
    pub fn all_variants() -> Vec<Self> {
        let mut out = Vec::new();
        for variant in [Variant::Dst, Variant::Dca, Variant::Ule] {
            for use_cmt in [false, true] {
                for pooling in [Pooling::Front, Pooling::Middle] {
                    out.push(Self::with(variant, use_cmt, pooling));
                }
            }
        }
        out
    }
}
