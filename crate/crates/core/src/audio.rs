//! Four-channel first-order Ambisonics clips and WAV I/O.

use std::path::Path;

use crate::error::{Result, SeldError};

pub const SAMPLE_RATE: u32 = 24_000;

/// ACN channel indices.
pub const W: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;
pub const X: usize = 3;

/// FoA audio in ACN order (W, Y, Z, X), SN3D normalized, at 24 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    channels: [Vec<f32>; 4],
    sample_rate: u32,
}

impl FoaClip {
    pub fn new(channels: [Vec<f32>; 4], sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(SeldError::Audio(format!(
                "sample rate {sample_rate} Hz; only {SAMPLE_RATE} Hz is accepted"
            )));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(SeldError::Audio("channels have different lengths".into()));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn silent(samples: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| vec![0.0; samples]),
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f32>; 4] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Accepts 16/24/32-bit PCM or 32-bit float WAV with exactly four channels.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let wav_err = |source| SeldError::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 4 {
            return Err(SeldError::Audio(format!("{}: {} channels, expected 4 (FoA)", path.display(), spec.channels)));
        }
        let interleaved: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>().map_err(wav_err)?,
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<Result<_, _>>()
                    .map_err(wav_err)?
            }
        };
        let mut channels: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(interleaved.len() / 4));
        for frame in interleaved.chunks_exact(4) {
            for (c, &v) in channels.iter_mut().zip(frame) {
                c.push(v);
            }
        }
        Self::new(channels, spec.sample_rate)
    }

    /// Writes 32-bit float WAV.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let wav_err = |source| SeldError::Wav {
            path: path.to_path_buf(),
            source,
        };
        let spec = hound::WavSpec {
            channels: 4,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for i in 0..self.len() {
            for c in &self.channels {
                w.write_sample(c[i]).map_err(wav_err)?;
            }
        }
        w.finalize().map_err(wav_err)
    }
}
