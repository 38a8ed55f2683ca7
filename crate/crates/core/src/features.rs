//! Log-mel spectrogram extraction and the `MAMF` feature file format.

use std::path::Path;

use numcore::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{io_err, write_atomic, Error, Result};

pub const DEFAULT_BINS: usize = 80;
pub const DEFAULT_WIN_MS: f64 = 25.0;
pub const DEFAULT_HOP_MS: f64 = 10.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const LOW_FREQ_HZ: f64 = 20.0;

const MAGIC: &[u8; 4] = b"MAMF";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(s) = samples.iter().find(|s| !(s.abs() <= 1.0)) {
            return Err(Error::InvalidAudio(format!("sample {s} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Reads 16-bit PCM mono WAV.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let bad = |e: hound::Error| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let mut reader = hound::WavReader::open(path).map_err(bad)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                    spec.channels, spec.bits_per_sample, spec.sample_format
                ),
            });
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let bad = |e: hound::Error| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(bad)?;
        for &s in &self.samples {
            w.write_sample((s * 32767.0).round() as i16).map_err(bad)?;
        }
        w.finalize().map_err(bad)
    }
}

/// An `n x d` matrix of frame features (frame index x bin), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Spectrogram {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::DimMismatch(format!("empty spectrogram {frames}x{dim}")));
        }
        if frames.checked_mul(dim) != Some(data.len()) {
            return Err(Error::DimMismatch(format!(
                "{frames}x{dim} spectrogram with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("spectrogram contains non-finite values".into()));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.frames, self.dim], self.data.clone()).expect("validated dims")
    }

    /// Writes the `MAMF` format atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + 4 * self.data.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.frames as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = || Error::Truncated {
            path: path.to_path_buf(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "MAMF",
            });
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 + 4 * i..8 + 4 * i)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(truncated)
        };
        let version = word(0)?;
        if version != VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let (frames, dim) = (word(1)? as usize, word(2)? as usize);
        let count = frames
            .checked_mul(dim)
            .filter(|c| c.checked_mul(4).is_some_and(|b| b <= isize::MAX as usize))
            .ok_or_else(|| Error::DimOverflow {
                path: path.to_path_buf(),
                dims: vec![frames, dim],
            })?;
        let payload = &bytes[16..];
        if payload.len() < count * 4 {
            return Err(truncated());
        }
        if payload.len() > count * 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("{} trailing bytes", payload.len() - count * 4),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(frames, dim, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale between 20 Hz and Nyquist.
/// Returns `bins` rows of `fft_size / 2 + 1` weights.
pub fn mel_filterbank(bins: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let sr = f64::from(sample_rate);
    let (lo, hi) = (hz_to_mel(LOW_FREQ_HZ), hz_to_mel(sr / 2.0));
    let edges: Vec<f64> = (0..bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bins + 1) as f64))
        .collect();
    let n_freq = fft_size / 2 + 1;
    (0..bins)
        .map(|m| {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freq)
                .map(|k| {
                    let f = k as f64 * sr / fft_size as f64;
                    if f > left && f <= center {
                        (f - left) / (center - left)
                    } else if f > center && f < right {
                        (right - f) / (right - center)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Frame count for `samples` samples: `(samples - win) / hop + 1`.
pub fn frame_count(samples: usize, win: usize, hop: usize) -> usize {
    (samples - win) / hop + 1
}

/// Hann-windowed power spectrum, mel-filtered, natural log with a `1e-10` floor.
pub fn stft_logmel(audio: &AudioBuffer, bins: usize, win_ms: f64, hop_ms: f64) -> Result<Spectrogram> {
    if bins < 2 {
        return Err(Error::TooFew {
            what: "mel bins",
            min: 2,
            got: bins,
        });
    }
    let sr = f64::from(audio.sample_rate());
    let win = (sr * win_ms / 1000.0).round() as usize;
    let hop = (sr * hop_ms / 1000.0).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Config(format!("window {win_ms} ms / hop {hop_ms} ms too short")));
    }
    let samples = audio.samples();
    if samples.len() < win {
        return Err(Error::AudioTooShort {
            samples: samples.len(),
            window: win,
        });
    }
    let fft_size = win.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos())
        .collect();
    let filters = mel_filterbank(bins, fft_size, audio.sample_rate());
    let n = frame_count(samples.len(), win, hop);

    let mut data = Vec::with_capacity(n * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..n {
        let frame = &samples[t * hop..t * hop + win];
        buf.fill(Complex::new(0.0, 0.0));
        for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            slot.re = f64::from(s) * w;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..fft_size / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for filt in &filters {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(energy.max(LOG_FLOOR).ln() as f32);
        }
    }
    Spectrogram::new(n, bins, data)
}

/// Per-utterance mean and variance normalization of every bin.
pub fn cmvn(spec: &Spectrogram) -> Result<Spectrogram> {
    let (n, d) = (spec.frames(), spec.dim());
    if n < 2 {
        return Err(Error::TooFew {
            what: "frames for cmvn",
            min: 2,
            got: n,
        });
    }
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(spec.row(i)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(spec.row(i)).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64).max(1e-8).sqrt()).collect();
    let data = spec
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&inv)
                .map(|((&v, m), s)| ((f64::from(v) - m) * s) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    Spectrogram::new(n, d, data)
}
