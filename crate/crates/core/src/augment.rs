//! Dual-crop sampling and waveform augmentation (additive noise at a target
//! SNR, reverberation by convolution with a room impulse response).

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::{gen_speaker, synthesize};
use crate::error::{CelError, Result};
use crate::features::{mean_power, read_wav, Waveform, SAMPLE_RATE};
use crate::rng::stream;

/// Two crops of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct CropPair {
    pub crop1: Waveform,
    pub crop2: Waveform,
    pub source_id: String,
    pub offsets: (usize, usize),
}

fn take_crop(u: &Waveform, start: usize, len: usize) -> Waveform {
    let n = u.len();
    let samples = if start + len <= n {
        u.samples[start..start + len].to_vec()
    } else {
        (0..len).map(|i| u.samples[(start + i) % n]).collect()
    };
    Waveform {
        samples,
        sample_rate: u.sample_rate,
    }
}

/// Draws two independent uniform crop offsets. Crops may overlap.
///
/// With `wrap` set, utterances shorter than `crop_len` are extended by
/// wrapping around instead of being rejected.
pub fn crop_two<R: Rng>(u: &Waveform, source_id: &str, crop_len: usize, wrap: bool, rng: &mut R) -> Result<CropPair> {
    if u.is_empty() || crop_len == 0 {
        return Err(CelError::UtteranceTooShort {
            needed: crop_len.max(1),
            got: u.len(),
        });
    }
    let (o1, o2) = if u.len() >= crop_len {
        let max = u.len() - crop_len;
        (rng.random_range(0..=max), rng.random_range(0..=max))
    } else if wrap {
        (rng.random_range(0..u.len()), rng.random_range(0..u.len()))
    } else {
        return Err(CelError::UtteranceTooShort {
            needed: crop_len,
            got: u.len(),
        });
    };
    Ok(CropPair {
        crop1: take_crop(u, o1, crop_len),
        crop2: take_crop(u, o2, crop_len),
        source_id: source_id.to_string(),
        offsets: (o1, o2),
    })
}

/// Result of mixing noise into a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMix {
    pub waveform: Waveform,
    /// Fraction of samples that hit the [-1, 1] rails.
    pub clipped_fraction: f64,
    /// Set when the signal had zero power; the output is then the unmodified signal.
    pub silent_signal: bool,
    pub noise_gain: f64,
}

/// Scales `noise` (same length as `signal`) so the mixture has the requested
/// SNR in dB, then clips to [-1, 1]. Infinite SNR returns the signal unchanged.
pub fn mix_at_snr(signal: &Waveform, noise: &[f64], snr_db: f64) -> Result<NoiseMix> {
    if noise.len() != signal.len() {
        return Err(CelError::ShapeMismatch(format!(
            "noise slice has {} samples, signal {}",
            noise.len(),
            signal.len()
        )));
    }
    let unchanged = |silent| NoiseMix {
        waveform: signal.clone(),
        clipped_fraction: 0.0,
        silent_signal: silent,
        noise_gain: 0.0,
    };
    if snr_db == f64::INFINITY {
        return Ok(unchanged(false));
    }
    if snr_db.is_nan() {
        return Err(CelError::InvalidParam("SNR is NaN".into()));
    }
    let p_signal = signal.power();
    if p_signal == 0.0 {
        log::warn!("silent signal; skipping additive noise");
        return Ok(unchanged(true));
    }
    let p_noise = mean_power(noise);
    if p_noise == 0.0 {
        return Err(CelError::InvalidParam("noise segment is silent".into()));
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut clipped = 0usize;
    let samples = signal
        .samples
        .iter()
        .zip(noise)
        .map(|(s, n)| {
            let v = s + gain * n;
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(NoiseMix {
        waveform: Waveform {
            samples,
            sample_rate: signal.sample_rate,
        },
        clipped_fraction: clipped as f64 / signal.len() as f64,
        silent_signal: false,
        noise_gain: gain,
    })
}

/// Mixes a random aligned slice of `noise` into `signal` at `snr_db`.
pub fn add_noise<R: Rng>(signal: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<NoiseMix> {
    if noise.len() < signal.len() {
        return Err(CelError::TooShort {
            needed: signal.len(),
            got: noise.len(),
        });
    }
    let offset = rng.random_range(0..=noise.len() - signal.len());
    mix_at_snr(signal, &noise.samples[offset..offset + signal.len()], snr_db)
}

/// Impulse responses up to this length are convolved directly.
const DIRECT_CONV_MAX_TAPS: usize = 64;

thread_local! {
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

/// `y[n] = sum_k h[k] x[n - k]` for `n < x.len()`.
fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if h.len() <= DIRECT_CONV_MAX_TAPS {
        return (0..x.len())
            .map(|n| {
                let mut acc = 0.0;
                for (k, hk) in h.iter().enumerate().take(n + 1) {
                    acc += hk * x[n - k];
                }
                acc
            })
            .collect();
    }
    let size = (x.len() + h.len() - 1).next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(size), p.plan_fft_inverse(size))
    });
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let mut xf = pad(x);
    let mut hf = pad(h);
    fwd.process(&mut xf);
    fwd.process(&mut hf);
    for (a, b) in xf.iter_mut().zip(&hf) {
        *a *= b;
    }
    inv.process(&mut xf);
    let scale = 1.0 / size as f64;
    xf[..x.len()].iter().map(|c| c.re * scale).collect()
}

/// Reverberates `s` with `rir`. The output keeps the input length and is
/// rescaled to the input peak if the convolution raised it.
pub fn apply_rir(s: &Waveform, rir: &[f64]) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(CelError::EmptyImpulse);
    }
    if rir.iter().any(|v| !v.is_finite()) {
        return Err(CelError::InvalidParam("impulse response has non-finite taps".into()));
    }
    let mut y = convolve_truncated(&s.samples, rir);
    let in_peak = s.peak();
    let out_peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if out_peak > in_peak && out_peak > 0.0 {
        let g = in_peak / out_peak;
        for v in y.iter_mut() {
            *v *= g;
        }
    }
    Ok(Waveform {
        samples: y,
        sample_rate: s.sample_rate,
    })
}

/// Amplitude envelope reaching -60 dB at `rt60_s`.
pub fn rir_envelope(t_s: f64, rt60_s: f64) -> f64 {
    (-3.0 * std::f64::consts::LN_10 * t_s / rt60_s).exp()
}

/// Exponentially decaying white noise with the first tap forced to 1.
pub fn synth_rir<R: Rng>(rt60_ms: f64, length_ms: f64, sample_rate: u32, rng: &mut R) -> Result<Vec<f64>> {
    if !(rt60_ms > 0.0) || !(length_ms > 0.0) {
        return Err(CelError::InvalidParam(format!(
            "rt60 and length must be positive, got {rt60_ms} ms and {length_ms} ms"
        )));
    }
    let taps = ((length_ms * sample_rate as f64 / 1000.0).round() as usize).max(1);
    let rt60 = rt60_ms / 1000.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let g: f64 = rng.sample(StandardNormal);
            g * rir_envelope(n as f64 / sample_rate as f64, rt60)
        })
        .collect();
    h[0] = 1.0;
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    None,
    Noise,
    Reverb,
    NoiseReverb,
}

impl AugmentKind {
    pub fn has_noise(self) -> bool {
        matches!(self, AugmentKind::Noise | AugmentKind::NoiseReverb)
    }

    pub fn has_reverb(self) -> bool {
        matches!(self, AugmentKind::Reverb | AugmentKind::NoiseReverb)
    }
}

/// Fully resolved augmentation for one crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub snr_db: f64,
    pub noise_index: usize,
    pub noise_offset: usize,
    pub rir_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub kinds: Vec<AugmentKind>,
    /// Pad short utterances by wrap-around instead of rejecting them.
    pub wrap_short: bool,
    /// Optional directory with `noise/` and `rir/` WAV subdirectories.
    pub bank_dir: Option<String>,
    pub synthetic_noises: usize,
    pub noise_seconds: f64,
    pub synthetic_rirs: usize,
    pub rt60_min_ms: f64,
    pub rt60_max_ms: f64,
    pub rir_length_ms: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            snr_min_db: 0.0,
            snr_max_db: 15.0,
            kinds: vec![AugmentKind::Noise, AugmentKind::Reverb, AugmentKind::NoiseReverb],
            wrap_short: false,
            bank_dir: None,
            synthetic_noises: 6,
            noise_seconds: 6.0,
            synthetic_rirs: 16,
            rt60_min_ms: 150.0,
            rt60_max_ms: 600.0,
            rir_length_ms: 300.0,
        }
    }
}

/// Noise recordings and room impulse responses to draw augmentations from.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    pub noises: Vec<Waveform>,
    pub rirs: Vec<Vec<f64>>,
}

fn white(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Pink-ish noise from white noise through Kellet's economy 1/f filter.
fn pink(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..len)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let p = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if p > 0.0 {
        for v in x.iter_mut() {
            *v *= peak / p;
        }
    }
    x
}

impl NoiseBank {
    /// Seeded synthetic bank: white, pink and babble noise, plus decaying-noise RIRs.
    pub fn synthetic(cfg: &AugmentConfig, seed: u64) -> Result<Self> {
        let len = (cfg.noise_seconds * SAMPLE_RATE as f64).round() as usize;
        let mut noises = Vec::with_capacity(cfg.synthetic_noises);
        for i in 0..cfg.synthetic_noises {
            let mut rng = stream(seed, &[0x6e6f, i as u64]);
            let samples = match i % 3 {
                0 => white(len, &mut rng),
                1 => pink(len, &mut rng),
                _ => {
                    let mut mix = vec![0.0; len];
                    for _ in 0..5 {
                        let speaker = gen_speaker(&mut rng);
                        let utt = synthesize(&speaker, len, &mut rng);
                        for (m, s) in mix.iter_mut().zip(&utt.samples) {
                            *m += s;
                        }
                    }
                    mix
                }
            };
            noises.push(Waveform::new(normalize_peak(samples, 0.5)));
        }
        let mut rirs = Vec::with_capacity(cfg.synthetic_rirs);
        for i in 0..cfg.synthetic_rirs {
            let mut rng = stream(seed, &[0x7269, i as u64]);
            let rt60 = rng.random_range(cfg.rt60_min_ms..=cfg.rt60_max_ms);
            rirs.push(synth_rir(rt60, cfg.rir_length_ms, SAMPLE_RATE, &mut rng)?);
        }
        Ok(Self { noises, rirs })
    }

    /// Loads `root/noise/*.wav` and `root/rir/*.wav` in lexicographic order.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let list = |sub: &str| -> Result<Vec<Waveform>> {
            let mut paths: Vec<_> = std::fs::read_dir(root.join(sub))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            paths.sort();
            paths.iter().map(|p| read_wav(p)).collect()
        };
        let noises = list("noise")?;
        let rirs: Vec<Vec<f64>> = list("rir")?.into_iter().map(|w| w.samples).collect();
        if noises.is_empty() && rirs.is_empty() {
            return Err(CelError::InvalidParam(format!("{} holds no noise or rir WAV files", root.display())));
        }
        Ok(Self { noises, rirs })
    }

    pub fn load(cfg: &AugmentConfig, seed: u64) -> Result<Self> {
        match &cfg.bank_dir {
            Some(dir) => Self::from_dir(Path::new(dir)),
            None => Self::synthetic(cfg, seed),
        }
    }
}

fn sample_spec<R: Rng>(cfg: &AugmentConfig, bank: &NoiseBank, crop_len: usize, rng: &mut R) -> Result<AugmentSpec> {
    let kinds: Vec<AugmentKind> = cfg
        .kinds
        .iter()
        .copied()
        .filter(|k| (!k.has_noise() || !bank.noises.is_empty()) && (!k.has_reverb() || !bank.rirs.is_empty()))
        .collect();
    if kinds.is_empty() {
        return Ok(AugmentSpec {
            kind: AugmentKind::None,
            snr_db: f64::INFINITY,
            noise_index: 0,
            noise_offset: 0,
            rir_index: 0,
        });
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    let snr_db = if cfg.snr_max_db > cfg.snr_min_db {
        rng.random_range(cfg.snr_min_db..cfg.snr_max_db)
    } else {
        cfg.snr_min_db
    };
    let (noise_index, noise_offset) = if kind.has_noise() {
        let i = rng.random_range(0..bank.noises.len());
        let n = bank.noises[i].len();
        if n < crop_len {
            return Err(CelError::TooShort { needed: crop_len, got: n });
        }
        (i, rng.random_range(0..=n - crop_len))
    } else {
        (0, 0)
    };
    let rir_index = if kind.has_reverb() {
        rng.random_range(0..bank.rirs.len())
    } else {
        0
    };
    Ok(AugmentSpec {
        kind,
        snr_db: if kind.has_noise() { snr_db } else { f64::INFINITY },
        noise_index,
        noise_offset,
        rir_index,
    })
}

/// Draws augmentations for both crops of a pair, redrawing the second until
/// the two differ.
pub fn sample_pair_specs<R: Rng>(cfg: &AugmentConfig, bank: &NoiseBank, crop_len: usize, rng: &mut R) -> Result<(AugmentSpec, AugmentSpec)> {
    let first = sample_spec(cfg, bank, crop_len, rng)?;
    if first.kind == AugmentKind::None {
        return Ok((first, first));
    }
    for _ in 0..64 {
        let second = sample_spec(cfg, bank, crop_len, rng)?;
        let same = second.kind == first.kind
            && (!first.kind.has_noise() || (second.noise_index, second.noise_offset) == (first.noise_index, first.noise_offset))
            && (!first.kind.has_reverb() || second.rir_index == first.rir_index);
        if !same {
            return Ok((first, second));
        }
    }
    // a single-kind, single-entry bank cannot be varied
    Ok((first, first))
}

/// Applies reverberation, then noise.
pub fn augment(crop: &Waveform, spec: &AugmentSpec, bank: &NoiseBank) -> Result<Waveform> {
    let mut out = crop.clone();
    if spec.kind.has_reverb() {
        out = apply_rir(&out, &bank.rirs[spec.rir_index])?;
    }
    if spec.kind.has_noise() {
        let noise = &bank.noises[spec.noise_index].samples[spec.noise_offset..spec.noise_offset + out.len()];
        out = mix_at_snr(&out, noise, spec.snr_db)?.waveform;
    }
    Ok(out)
}
