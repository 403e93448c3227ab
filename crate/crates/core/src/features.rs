//! Log-Mel spectrogram front end and 16-bit PCM WAV I/O.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{CelError, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub mean_norm: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            n_mels: 40,
            f_min: 20.0,
            f_max: 7600.0,
            log_floor: 1e-6,
            mean_norm: true,
        }
    }
}

impl FeatureConfig {
    /// Number of full frames that fit in `len` samples, or 0.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_length {
            0
        } else {
            (len - self.win_length) / self.hop_length + 1
        }
    }

    /// Samples needed to produce exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop_length + self.win_length
    }
}

/// Log-Mel features. Logically `n_mels x frames` (rows are mel bands);
/// stored frame-major so each frame is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_mels: usize,
    frames: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_frames(n_mels: usize, frames: Vec<Vec<f64>>) -> Result<Self> {
        let count = frames.len();
        let mut data = Vec::with_capacity(count * n_mels);
        for f in frames {
            if f.len() != n_mels {
                return Err(CelError::DimensionMismatch {
                    expected: n_mels,
                    found: f.len(),
                });
            }
            data.extend(f);
        }
        Ok(Self {
            n_mels,
            frames: count,
            data,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.data[frame * self.n_mels + band]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Frame-major buffer, `frames * n_mels` long.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with centers equally spaced on the mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `n_filters` rows of `fft_size / 2 + 1` weights
    pub weights: Vec<Vec<f64>>,
    pub centers_hz: Vec<f64>,
}

pub fn mel_filterbank(n_filters: usize, fft_size: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_filters == 0 || fft_size < 2 || !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(CelError::InvalidRange(format!(
            "need n_filters >= 1 and 0 <= f_min < f_max <= {nyquist}, got {n_filters} filters over [{f_min}, {f_max}]"
        )));
    }
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
    let mut weights = Vec::with_capacity(n_filters);
    for f in 0..n_filters {
        let (left, center, right) = (edges[f], edges[f + 1], edges[f + 2]);
        let row: Vec<f64> = (0..bins)
            .map(|k| {
                let hz = bin_hz(k);
                let up = (hz - left) / (center - left);
                let down = (right - hz) / (right - center);
                up.min(down).max(0.0)
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            return Err(CelError::InvalidRange(format!(
                "mel filter {f} ({left:.1}-{right:.1} Hz) covers no FFT bin; use fewer filters or a larger FFT"
            )));
        }
        weights.push(row);
    }
    Ok(MelFilterbank {
        weights,
        centers_hz: edges[1..=n_filters].to_vec(),
    })
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable log-Mel extractor: caches the filterbank, window and FFT plan.
#[derive(Clone)]
pub struct LogMel {
    cfg: FeatureConfig,
    bank: MelFilterbank,
    window: Vec<f64>,
    /// nonzero bin range of each filter
    support: Vec<(usize, usize)>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl LogMel {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        if cfg.win_length == 0 || cfg.hop_length == 0 || cfg.win_length > cfg.n_fft {
            return Err(CelError::InvalidParam(format!(
                "window {} and hop {} must be positive with window <= n_fft {}",
                cfg.win_length, cfg.hop_length, cfg.n_fft
            )));
        }
        if !(cfg.log_floor > 0.0) {
            return Err(CelError::InvalidParam("log floor must be positive".into()));
        }
        let bank = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)?;
        let window = hamming(cfg.win_length);
        let support = bank
            .weights
            .iter()
            .map(|row| {
                let first = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
                (first, last)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            bank,
            window,
            support,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Mel filter energies per frame, before the log.
    pub fn filter_energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(CelError::InvalidParam(format!(
                "waveform sample rate {} differs from feature rate {}",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        let frames = self.cfg.frame_count(w.len());
        if frames == 0 {
            return Err(CelError::TooShort {
                needed: self.cfg.win_length,
                got: w.len(),
            });
        }
        let bins = self.cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * self.cfg.hop_length;
            let frame = &w.samples[start..start + self.cfg.win_length];
            for (slot, (x, h)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(x * h, 0.0);
            }
            for slot in buf[self.cfg.win_length..].iter_mut() {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            out.push(
                self.bank
                    .weights
                    .iter()
                    .zip(&self.support)
                    .map(|(row, &(lo, hi))| row[lo..hi].iter().zip(&power[lo..hi]).map(|(a, b)| a * b).sum())
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let mut frames = self.filter_energies(w)?;
        for f in frames.iter_mut() {
            for e in f.iter_mut() {
                *e = (*e + self.cfg.log_floor).ln();
            }
        }
        if self.cfg.mean_norm {
            let n = frames.len() as f64;
            for band in 0..self.cfg.n_mels {
                let mean = frames.iter().map(|f| f[band]).sum::<f64>() / n;
                for f in frames.iter_mut() {
                    f[band] -= mean;
                }
            }
        }
        FeatureMatrix::from_frames(self.cfg.n_mels, frames)
    }
}

/// One-shot log-Mel extraction.
pub fn logmel(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    LogMel::new(cfg.clone())?.compute(w)
}

/// Reads mono 16-bit PCM WAV at 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let audio_err = |msg: String| CelError::Audio {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => CelError::Io(io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(format!(
            "expected 16-bit signed PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(audio_err(format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate)));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    Ok(Waveform::new(samples))
}

/// Writes mono 16-bit PCM; samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => CelError::Io(io),
        other => CelError::Audio {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}
