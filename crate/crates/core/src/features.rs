//! Log-mel spectrograms and mel-band intensity vectors from FoA audio.
//!
//! Output channel layout: 0–3 log-mel of W, Y, Z, X; 4–6 normalized
//! intensity I_x, I_y, I_z, all on the same 64 mel bands.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use seld_autodiff::Tensor;

use crate::audio::{FoaClip, SAMPLE_RATE, W, X, Y, Z};
use crate::error::{Result, SeldError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Hop in samples (0.02 s).
    pub hop: usize,
    /// Hann window length in samples (0.04 s).
    pub win: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    pub iv_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            hop: 480,
            win: 960,
            n_fft: 1024,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 12_000.0,
            log_floor: 1e-8,
            iv_eps: 1e-8,
        }
    }
}

impl FeatureConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    /// Frames produced for `samples` input samples.
    pub fn n_frames(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }
}

/// Complex STFT of the four FoA channels, indexed `[channel][frame][bin]`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: [Vec<Complex<f64>>; 4],
}

impl Spectrogram {
    pub fn bin(&self, ch: usize, frame: usize, bin: usize) -> Complex<f64> {
        self.data[ch][frame * self.n_bins + bin]
    }

    pub fn frame(&self, ch: usize, frame: usize) -> &[Complex<f64>] {
        &self.data[ch][frame * self.n_bins..(frame + 1) * self.n_bins]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank; each band's weights sum to one.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major `(n_mels, n_bins)`.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        let n_bins = cfg.n_bins();
        let nyquist = cfg.sample_rate as f64 / 2.0;
        if !(0.0 <= cfg.fmin_hz && cfg.fmin_hz < cfg.fmax_hz && cfg.fmax_hz <= nyquist) {
            return Err(SeldError::Config(format!("mel range {}..{} Hz invalid", cfg.fmin_hz, cfg.fmax_hz)));
        }
        let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (b, w) in row.iter_mut().enumerate() {
                let f = b as f64 * bin_hz;
                *w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
            }
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                return Err(SeldError::Config(format!(
                    "mel band {m} ({l:.1}-{r:.1} Hz) contains no FFT bin; reduce n_mels or raise n_fft"
                )));
            }
            row.iter_mut().for_each(|w| *w /= s);
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            n_bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// `out[m] = Σ_b weights[m][b] · x[b]`, skipping zero weights.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(x).filter(|(w, _)| **w != 0.0).map(|(w, v)| w * v).sum();
        }
    }
}

/// STFT, filterbank and FFT plan bundled for repeated extraction.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

/// Model input for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    /// `(7, T, n_mels)`.
    pub features: Tensor<f32>,
    pub frame_hop_s: f64,
}

impl FeatureClip {
    pub fn n_frames(&self) -> usize {
        self.features.shape()[1]
    }
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        if cfg.win > cfg.n_fft || cfg.hop == 0 {
            return Err(SeldError::Config(format!("window {} / hop {} incompatible with n_fft {}", cfg.win, cfg.hop, cfg.n_fft)));
        }
        let filterbank = MelFilterbank::new(&cfg)?;
        // periodic Hann, zero-padded symmetrically to n_fft
        let off = (cfg.n_fft - cfg.win) / 2;
        let mut window = vec![0.0; cfg.n_fft];
        for i in 0..cfg.win {
            window[off + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win as f64).cos();
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            filterbank,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Centered STFT with reflection padding; frame `t` is centered on sample `t·hop`.
    pub fn stft(&self, clip: &FoaClip) -> Result<Spectrogram> {
        let n = clip.len();
        let half = self.cfg.n_fft / 2;
        if n < self.cfg.win.max(half + 1) {
            return Err(SeldError::TooShort {
                samples: n,
                needed: self.cfg.win.max(half + 1),
            });
        }
        let n_frames = self.cfg.n_frames(n);
        let n_bins = self.cfg.n_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let data = std::array::from_fn(|ch| {
            let x = clip.channel(ch);
            let padded: Vec<f64> = (0..n + 2 * half)
                .map(|i| {
                    let j = i as isize - half as isize;
                    let k = if j < 0 {
                        (-j) as usize
                    } else if j as usize >= n {
                        2 * (n - 1) - j as usize
                    } else {
                        j as usize
                    };
                    x[k] as f64
                })
                .collect();
            let mut out = Vec::with_capacity(n_frames * n_bins);
            for t in 0..n_frames {
                let seg = &padded[t * self.cfg.hop..t * self.cfg.hop + self.cfg.n_fft];
                for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                    *b = Complex::new(s * w, 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                out.extend_from_slice(&buf[..n_bins]);
            }
            out
        });
        Ok(Spectrogram { n_frames, n_bins, data })
    }

    /// `(4, T, n_mels)` log mel power for W, Y, Z, X.
    pub fn logmel(&self, spec: &Spectrogram) -> Tensor<f32> {
        let m = self.cfg.n_mels;
        let mut out = Vec::with_capacity(4 * spec.n_frames * m);
        let mut power = vec![0.0; spec.n_bins];
        let mut mel = vec![0.0; m];
        for ch in 0..4 {
            for t in 0..spec.n_frames {
                for (p, c) in power.iter_mut().zip(spec.frame(ch, t)) {
                    *p = c.norm_sqr();
                }
                self.filterbank.apply(&power, &mut mel);
                out.extend(mel.iter().map(|&e| (e + self.cfg.log_floor).ln() as f32));
            }
        }
        Tensor::new(vec![4, spec.n_frames, m], out).expect("logmel shape")
    }

    /// `(3, T, n_mels)` intensity vectors `Re{conj(W)·(X,Y,Z)}`, divided per
    /// bin by the total FoA energy, then averaged into mel bands.
    pub fn intensity_vectors(&self, spec: &Spectrogram) -> Tensor<f32> {
        let m = self.cfg.n_mels;
        let t_n = spec.n_frames;
        let mut out = vec![0f32; 3 * t_n * m];
        let mut iv: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; spec.n_bins]);
        let mut mel = vec![0.0; m];
        for t in 0..t_n {
            let (w, y, z, x) = (spec.frame(W, t), spec.frame(Y, t), spec.frame(Z, t), spec.frame(X, t));
            for b in 0..spec.n_bins {
                let energy = w[b].norm_sqr() + x[b].norm_sqr() + y[b].norm_sqr() + z[b].norm_sqr() + self.cfg.iv_eps;
                let wc = w[b].conj();
                iv[0][b] = (wc * x[b]).re / energy;
                iv[1][b] = (wc * y[b]).re / energy;
                iv[2][b] = (wc * z[b]).re / energy;
            }
            for (axis, v) in iv.iter().enumerate() {
                self.filterbank.apply(v, &mut mel);
                for (k, &e) in mel.iter().enumerate() {
                    out[(axis * t_n + t) * m + k] = e as f32;
                }
            }
        }
        Tensor::new(vec![3, t_n, m], out).expect("iv shape")
    }

    /// Full 7-channel feature tensor.
    pub fn extract(&self, clip: &FoaClip) -> Result<FeatureClip> {
        let spec = self.stft(clip)?;
        let lm = self.logmel(&spec);
        let iv = self.intensity_vectors(&spec);
        let mut data = lm.into_data();
        data.extend_from_slice(iv.data());
        Ok(FeatureClip {
            features: Tensor::new(vec![7, spec.n_frames, self.cfg.n_mels], data)?,
            frame_hop_s: self.cfg.frame_hop_s(),
        })
    }
}

/// Energy-weighted mean intensity direction over all frames and bands,
/// normalized to unit length. Weights are the linear W mel energies.
pub fn mean_iv_direction(features: &Tensor<f32>) -> [f64; 3] {
    let (t_n, m) = (features.shape()[1], features.shape()[2]);
    let d = features.data();
    let mut acc = [0.0f64; 3];
    for i in 0..t_n * m {
        let weight = (d[i] as f64).exp();
        for (a, v) in acc.iter_mut().enumerate() {
            *v += weight * d[(4 + a) * t_n * m + i] as f64;
        }
    }
    let n = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
    if n == 0.0 {
        return [0.0; 3];
    }
    [acc[0] / n, acc[1] / n, acc[2] / n]
}
