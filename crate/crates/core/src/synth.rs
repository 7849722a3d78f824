//! Synthetic free-field FoA scenes with exact labels.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{FoaClip, SAMPLE_RATE, W, X, Y, Z};
use crate::error::{io_err, Result, SeldError};
use crate::events::{doa_to_vector, Event, EventList, LABEL_HOP_S, NUM_TRACKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Tone,
    Chirp,
    NoiseBurst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvent {
    pub class: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub kind: SourceKind,
    pub amplitude: f64,
}

impl SceneEvent {
    /// Label frames covered by `[onset, offset)`.
    pub fn frames(&self) -> std::ops::Range<usize> {
        let start = (self.onset_s / LABEL_HOP_S + 1e-9).floor() as usize;
        let end = (self.offset_s / LABEL_HOP_S - 1e-9).ceil() as usize;
        start..end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub duration_s: f64,
    pub events: Vec<SceneEvent>,
    /// Diffuse noise SNR in dB relative to the mean W power; `None` is noiseless.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
}

/// Base frequency of a class's source signal.
pub fn class_frequency(class: usize) -> f64 {
    300.0 * 1.25f64.powi(class as i32)
}

const FADE_S: f64 = 0.01;

impl SceneSpec {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    pub fn n_label_frames(&self) -> usize {
        (self.duration_s / LABEL_HOP_S - 1e-9).ceil() as usize
    }

    /// Event list at label resolution. Tracks are assigned greedily in onset
    /// order: each event takes the lowest track free among overlapping
    /// same-class events.
    pub fn event_list(&self, num_classes: usize) -> Result<EventList> {
        let mut order: Vec<usize> = (0..self.events.len()).collect();
        order.sort_by(|&a, &b| self.events[a].onset_s.total_cmp(&self.events[b].onset_s).then(a.cmp(&b)));
        let mut placed: Vec<(std::ops::Range<usize>, usize, usize)> = Vec::new();
        let mut rows = Vec::new();
        for i in order {
            let e = &self.events[i];
            let frames = e.frames();
            let busy: Vec<usize> = placed
                .iter()
                .filter(|(r, c, _)| *c == e.class && r.start < frames.end && frames.start < r.end)
                .map(|(_, _, t)| *t)
                .collect();
            let track = (0..NUM_TRACKS).find(|t| !busy.contains(t)).ok_or_else(|| {
                SeldError::Capacity(format!(
                    "more than {NUM_TRACKS} overlapping events of class {} at {:.1} s",
                    e.class, e.onset_s
                ))
            })?;
            placed.push((frames.clone(), e.class, track));
            rows.extend(frames.map(|frame| Event {
                frame,
                class: e.class,
                track,
                azimuth: e.azimuth_deg,
                elevation: e.elevation_deg,
            }));
        }
        EventList::from_events(rows, num_classes)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(SeldError::Config(format!("scene duration {} s", self.duration_s)));
        }
        for e in &self.events {
            if !(0.0 <= e.onset_s && e.onset_s < e.offset_s && e.offset_s <= self.duration_s + 1e-9) {
                return Err(SeldError::Config(format!(
                    "event [{}, {}) s outside scene of {} s",
                    e.onset_s, e.offset_s, self.duration_s
                )));
            }
            if !(-90.0..=90.0).contains(&e.elevation_deg) {
                return Err(SeldError::Config(format!("elevation {} out of range", e.elevation_deg)));
            }
        }
        self.event_list(num_classes).map(|_| ())
    }
}

fn source_signal(e: &SceneEvent, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let f0 = class_frequency(e.class);
    let tau = 2.0 * std::f64::consts::PI;
    let dur = n as f64 / sr;
    let mut s: Vec<f64> = match e.kind {
        SourceKind::Tone => {
            let phase = rng.gen::<f64>() * tau;
            (0..n).map(|i| (tau * f0 * i as f64 / sr + phase).sin()).collect()
        }
        SourceKind::Chirp => {
            // linear sweep f0 -> 1.5 f0
            let k = 0.5 * f0 / dur.max(1e-3);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (tau * (f0 * t + 0.5 * k * t * t)).sin()
                })
                .collect()
        }
        SourceKind::NoiseBurst => {
            let parts: Vec<(f64, f64)> = (0..16).map(|_| (f0 * (1.0 + rng.gen::<f64>()), rng.gen::<f64>() * tau)).collect();
            let norm = (2.0 / parts.len() as f64).sqrt();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    norm * parts.iter().map(|&(f, p)| (tau * f * t + p).sin()).sum::<f64>()
                })
                .collect()
        }
    };
    let fade = ((FADE_S * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / fade as f64).cos();
        s[i] *= g;
        s[n - 1 - i] *= g;
    }
    s.iter_mut().for_each(|v| *v *= e.amplitude);
    s
}

/// Renders the scene: each source is plane-wave encoded (SN3D) and summed.
pub fn render(spec: &SceneSpec, num_classes: usize) -> Result<(FoaClip, EventList)> {
    spec.validate(num_classes)?;
    let events = spec.event_list(num_classes)?;
    let n = spec.n_samples();
    let mut acc: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for (i, e) in spec.events.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let start = (e.onset_s * SAMPLE_RATE as f64).round() as usize;
        let end = ((e.offset_s * SAMPLE_RATE as f64).round() as usize).min(n);
        let s = source_signal(e, end - start, &mut rng);
        let [x, y, z] = doa_to_vector(e.azimuth_deg, e.elevation_deg);
        for (k, v) in s.iter().enumerate() {
            acc[W][start + k] += v;
            acc[X][start + k] += v * x;
            acc[Y][start + k] += v * y;
            acc[Z][start + k] += v * z;
        }
    }
    if let Some(snr) = spec.noise_snr_db {
        let power = acc[W].iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0xD1B5_4A32_D192_ED03));
        for ch in acc.iter_mut() {
            for v in ch.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let clip = FoaClip::new(acc.map(|c| c.into_iter().map(|v| v as f32).collect()), SAMPLE_RATE)?;
    Ok((clip, events))
}

/// Maximum number of simultaneously active events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapProfile {
    Mono,
    Ov2,
    Ov3,
}

impl OverlapProfile {
    pub fn max_polyphony(self) -> usize {
        match self {
            Self::Mono => 1,
            Self::Ov2 => 2,
            Self::Ov3 => 3,
        }
    }
}

impl std::str::FromStr for OverlapProfile {
    type Err = SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mono" | "ov1" => Ok(Self::Mono),
            "ov2" => Ok(Self::Ov2),
            "ov3" => Ok(Self::Ov3),
            _ => Err(SeldError::Config(format!("unknown overlap profile `{s}` (expected mono, ov2 or ov3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_clips: usize,
    pub num_classes: usize,
    pub overlap: OverlapProfile,
    pub seed: u64,
    pub duration_s: f64,
    pub noise_snr_db: Option<f64>,
    pub kinds: Vec<SourceKind>,
    /// Event length range in seconds, on the 100 ms grid.
    pub event_len_s: (f64, f64),
    /// Minimum angular separation between overlapping events, degrees.
    pub min_separation_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_clips: 8,
            num_classes: crate::events::NUM_CLASSES,
            overlap: OverlapProfile::Ov2,
            seed: 0,
            duration_s: 5.0,
            noise_snr_db: None,
            kinds: vec![SourceKind::Tone, SourceKind::Chirp, SourceKind::NoiseBurst],
            event_len_s: (0.5, 2.0),
            min_separation_deg: 45.0,
        }
    }
}

fn angle_between(a: &SceneEvent, b: &SceneEvent) -> f64 {
    let (u, v) = (doa_to_vector(a.azimuth_deg, a.elevation_deg), doa_to_vector(b.azimuth_deg, b.elevation_deg));
    (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Draws one scene. Each polyphony layer is an independent sequence of
/// non-overlapping events; overlapping events get distinct classes and
/// directions at least `min_separation_deg` apart.
pub fn sample_scene(cfg: &DatasetConfig, rng: &mut impl Rng) -> SceneSpec {
    let grid = |s: f64| (s / LABEL_HOP_S).round() as usize;
    let total = grid(cfg.duration_s);
    let (lo, hi) = (grid(cfg.event_len_s.0).max(1), grid(cfg.event_len_s.1).max(1));
    let mut events: Vec<SceneEvent> = Vec::new();
    for layer in 0..cfg.overlap.max_polyphony() {
        let mut cursor = if layer == 0 { rng.gen_range(0..=2) } else { rng.gen_range(0..=total / 3) };
        loop {
            let len = rng.gen_range(lo..=hi);
            if cursor + len > total {
                break;
            }
            let (onset_s, offset_s) = (cursor as f64 * LABEL_HOP_S, (cursor + len) as f64 * LABEL_HOP_S);
            let overlapping: Vec<&SceneEvent> = events.iter().filter(|e| e.onset_s < offset_s && onset_s < e.offset_s).collect();
            let classes: Vec<usize> = (0..cfg.num_classes).filter(|c| overlapping.iter().all(|e| e.class != *c)).collect();
            let mut candidate = None;
            for _ in 0..64 {
                let e = SceneEvent {
                    class: *classes.choose(rng).expect("fewer overlapping events than classes"),
                    onset_s,
                    offset_s,
                    azimuth_deg: rng.gen_range(-180..180) as f64,
                    elevation_deg: rng.gen_range(-45..=45) as f64,
                    kind: *cfg.kinds.choose(rng).unwrap_or(&SourceKind::Tone),
                    amplitude: rng.gen_range(0.3..0.6),
                };
                if overlapping.iter().all(|o| angle_between(o, &e) >= cfg.min_separation_deg) {
                    candidate = Some(e);
                    break;
                }
            }
            if let Some(e) = candidate {
                events.push(e);
            }
            cursor += len + rng.gen_range(1..=5);
        }
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.class.cmp(&b.class)));
    SceneSpec {
        duration_s: cfg.duration_s,
        events,
        noise_snr_db: cfg.noise_snr_db,
        seed: rng.gen(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub wav: String,
    pub csv: String,
    pub scene: SceneSpec,
}

/// Dataset index written as `manifest.json`; paths are relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub clips: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| SeldError::Format(format!("{}: {e}", path.display())))
    }

    pub fn wav_path(&self, dir: &Path, i: usize) -> PathBuf {
        dir.join(&self.clips[i].wav)
    }

    pub fn csv_path(&self, dir: &Path, i: usize) -> PathBuf {
        dir.join(&self.clips[i].csv)
    }
}

/// Renders `cfg.n_clips` scenes into `out` as WAV + CSV pairs plus a manifest.
pub fn make_dataset(out: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<Manifest> {
    let out = out.as_ref();
    if cfg.num_classes < cfg.overlap.max_polyphony() {
        return Err(SeldError::Config(format!(
            "{} classes cannot realize overlap profile {:?}",
            cfg.num_classes, cfg.overlap
        )));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clips = Vec::with_capacity(cfg.n_clips);
    for i in 0..cfg.n_clips {
        let scene = sample_scene(cfg, &mut rng);
        let (clip, events) = render(&scene, cfg.num_classes)?;
        let name = format!("clip_{i:04}");
        let entry = ManifestEntry {
            wav: format!("{name}.wav"),
            csv: format!("{name}.csv"),
            name,
            scene,
        };
        clip.write_wav(out.join(&entry.wav))?;
        events.write_csv(out.join(&entry.csv))?;
        clips.push(entry);
    }
    let manifest = Manifest { config: cfg.clone(), clips };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SeldError::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}
