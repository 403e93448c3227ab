//! Seeded source-filter "speakers" and the corpora built from them.
//!
//! Each speaker is a harmonic glottal source (f0, spectral tilt, per-harmonic
//! amplitudes, vibrato) shaped by two resonators. Utterances are strings of
//! syllables that perturb the speaker's f0 and resonances, separated by short
//! breathy gaps, so within-speaker variation is real but smaller than the
//! variation between speakers.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, sample_pair_specs, AugmentConfig, NoiseBank};
use crate::error::{CelError, Result};
use crate::features::{read_wav, write_wav, FeatureConfig, Waveform, SAMPLE_RATE};
use crate::rng::stream;

pub const HARMONICS: usize = 12;
/// Utterances must hold two default crops (180 frames each).
pub const MIN_UTTERANCE_SAMPLES: usize = 2 * 29_040;

#[derive(Debug, Clone, PartialEq)]
pub struct Resonance {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    pub harmonic_amps: Vec<f64>,
    pub formants: [Resonance; 2],
    pub vibrato_rate_hz: f64,
    pub vibrato_depth: f64,
    pub drift_depth: f64,
    pub breathiness: f64,
}

/// Samples a speaker within the documented parameter ranges.
pub fn gen_speaker<R: Rng>(rng: &mut R) -> SpeakerProfile {
    // log-uniform f0 over [80, 300] Hz
    let f0_hz = (80f64.ln() + rng.random::<f64>() * (300f64 / 80.0).ln()).exp().clamp(80.0, 300.0);
    let tilt = rng.random_range(0.6..1.6);
    let harmonic_amps = (1..=HARMONICS)
        .map(|k| (k as f64).powf(-tilt) * rng.random_range(0.5..1.5))
        .collect();
    let f1 = rng.random_range(320.0..950.0);
    let f2 = rng.random_range((f1 + 350.0_f64).max(1000.0)..3300.0);
    SpeakerProfile {
        f0_hz,
        harmonic_amps,
        formants: [
            Resonance {
                freq_hz: f1,
                bandwidth_hz: rng.random_range(60.0..160.0),
            },
            Resonance {
                freq_hz: f2,
                bandwidth_hz: rng.random_range(80.0..220.0),
            },
        ],
        vibrato_rate_hz: rng.random_range(3.0..7.0),
        vibrato_depth: rng.random_range(0.005..0.03),
        drift_depth: rng.random_range(0.02..0.08),
        breathiness: rng.random_range(0.005..0.04),
    }
}

struct Syllable {
    len: usize,
    gap: usize,
    f0_scale: f64,
    formant_scale: [f64; 2],
    gain: f64,
}

/// Two-pole resonator with unit gain at its center frequency (approximately).
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64) -> f64 {
        let r = (-PI * bw / SAMPLE_RATE as f64).exp();
        let theta = 2.0 * PI * freq / SAMPLE_RATE as f64;
        let y = (1.0 - r) * x + 2.0 * r * theta.cos() * self.y1 - r * r * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Renders `n_samples` of speech-like audio for `p`, peak-normalized to 0.5.
pub fn synthesize<R: Rng>(p: &SpeakerProfile, n_samples: usize, rng: &mut R) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    // per-utterance session offsets
    let session_f0 = (0.04 * rng.sample::<f64, _>(StandardNormal)).exp();
    let session_formant = 1.0 + 0.02 * rng.sample::<f64, _>(StandardNormal);

    let mut syllables = Vec::new();
    let mut total = 0;
    while total < n_samples {
        let s = Syllable {
            len: (rng.random_range(0.15..0.35) * sr) as usize,
            gap: (rng.random_range(0.02..0.10) * sr) as usize,
            f0_scale: (0.06 * rng.sample::<f64, _>(StandardNormal)).exp(),
            formant_scale: [
                1.0 + 0.08 * rng.sample::<f64, _>(StandardNormal),
                1.0 + 0.06 * rng.sample::<f64, _>(StandardNormal),
            ],
            gain: rng.random_range(0.6..1.0),
        };
        total += s.len + s.gap;
        syllables.push(s);
    }

    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let drift_rate = rng.random_range(0.2..0.6);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let n_harm = ((7600.0 / p.f0_hz) as usize).clamp(1, 40);
    let amps: Vec<f64> = (0..n_harm)
        .map(|k| {
            p.harmonic_amps.get(k).copied().unwrap_or_else(|| {
                let last = p.harmonic_amps[HARMONICS - 1];
                last * (HARMONICS as f64 / (k + 1) as f64).powi(2)
            })
        })
        .collect();

    let mut out = Vec::with_capacity(n_samples);
    let mut phase = 0.0f64;
    let mut res = [Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }];
    // smoothed control values
    let mut f0_scale = 1.0;
    let mut fscale = [1.0, 1.0];
    let mut gain = 0.0;
    let ramp = 1.0 - (-1.0 / (0.01 * sr)).exp();
    let mut n = 0usize;
    'outer: for s in &syllables {
        for i in 0..s.len + s.gap {
            if n == n_samples {
                break 'outer;
            }
            let voiced = i < s.len;
            let t = n as f64 / sr;
            f0_scale += ramp * (s.f0_scale - f0_scale);
            for (f, target) in fscale.iter_mut().zip(&s.formant_scale) {
                *f += ramp * (target - *f);
            }
            gain += ramp * (if voiced { s.gain } else { 0.0 } - gain);
            let f0 = p.f0_hz
                * session_f0
                * f0_scale
                * (1.0 + p.vibrato_depth * (2.0 * PI * p.vibrato_rate_hz * t + vib_phase).sin())
                * (1.0 + p.drift_depth * (2.0 * PI * drift_rate * t + drift_phase).sin());
            phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
            // sin(k phase) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut src = 0.0;
            for (k, a) in amps.iter().enumerate() {
                if (k + 1) as f64 * f0 >= 7800.0 {
                    break;
                }
                src += a * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            let noise: f64 = rng.sample(StandardNormal);
            let x = gain * src + p.breathiness * noise;
            let mut y = x;
            for (k, r) in res.iter_mut().enumerate() {
                let f = (p.formants[k].freq_hz * session_formant * fscale[k]).clamp(200.0, 3800.0);
                y = r.step(y, f, p.formants[k].bandwidth_hz);
            }
            // keep some of the unfiltered source so the harmonics stay visible
            out.push(0.3 * x + 4.0 * y);
            n += 1;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in out.iter_mut() {
            *v = *v / peak * 0.5;
        }
    }
    Waveform::new(out)
}

/// A full utterance of `duration_s` seconds. Rejects durations too short for
/// two default crops.
pub fn gen_utterance<R: Rng>(p: &SpeakerProfile, duration_s: f64, rng: &mut R) -> Result<Waveform> {
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    if n < MIN_UTTERANCE_SAMPLES {
        return Err(CelError::TooShort {
            needed: MIN_UTTERANCE_SAMPLES,
            got: n,
        });
    }
    Ok(synthesize(p, n, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker_id: Option<String>,
    pub utterance_id: String,
    pub relative_path: String,
    pub waveform: Waveform,
}

/// In-memory corpus: utterances in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_seconds(&self) -> f64 {
        self.utterances.iter().map(|u| u.waveform.duration_s()).sum()
    }

    /// Distinct speaker labels in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for u in &self.utterances {
            if let Some(s) = &u.speaker_id {
                if !seen.contains(s) {
                    seen.push(s.clone());
                }
            }
        }
        seen
    }

    pub fn is_labeled(&self) -> bool {
        !self.utterances.is_empty() && self.utterances.iter().all(|u| u.speaker_id.is_some())
    }

    /// Dense label per utterance, indexing into [`Corpus::speakers`].
    pub fn labels(&self) -> Result<Vec<usize>> {
        let speakers = self.speakers();
        self.utterances
            .iter()
            .map(|u| {
                let s = u.speaker_id.as_ref().ok_or_else(|| {
                    CelError::MissingLabels(format!("utterance {} is listed with speaker `-`", u.utterance_id))
                })?;
                Ok(speakers.iter().position(|x| x == s).expect("speaker listed"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub eval_speakers: usize,
    pub eval_utterances_per_speaker: usize,
    /// Pass evaluation utterances through held-out noise and reverberation.
    pub eval_augment: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 32,
            utterances_per_speaker: 6,
            duration_s: 4.0,
            eval_speakers: 16,
            eval_utterances_per_speaker: 4,
            eval_augment: true,
        }
    }
}

fn build(seed: u64, tag: u64, speakers: usize, per_speaker: usize, duration_s: f64, prefix: &str) -> Result<Corpus> {
    let mut utterances = Vec::with_capacity(speakers * per_speaker);
    for s in 0..speakers {
        let profile = gen_speaker(&mut stream(seed, &[tag, s as u64]));
        let speaker_id = format!("{prefix}{s:03}");
        for u in 0..per_speaker {
            let waveform = gen_utterance(&profile, duration_s, &mut stream(seed, &[tag, s as u64, u as u64 + 1]))?;
            utterances.push(Utterance {
                speaker_id: Some(speaker_id.clone()),
                utterance_id: format!("{speaker_id}-u{u:02}"),
                relative_path: format!("{speaker_id}/u{u:02}.wav"),
                waveform,
            });
        }
    }
    Ok(Corpus { utterances })
}

/// Training corpus: `speakers x utterances_per_speaker` utterances.
pub fn gen_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    build(seed, 1, cfg.speakers, cfg.utterances_per_speaker, cfg.duration_s, "spk")
}

/// Held-out speakers for verification trials, optionally degraded by noise
/// and reverberation drawn from a bank disjoint from the training bank.
pub fn gen_eval_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    let mut corpus = build(seed, 2, cfg.eval_speakers, cfg.eval_utterances_per_speaker, cfg.duration_s, "eval")?;
    if cfg.eval_augment {
        let aug = AugmentConfig {
            noise_seconds: cfg.duration_s.max(1.0) + 1.0,
            snr_min_db: 5.0,
            snr_max_db: 20.0,
            ..AugmentConfig::default()
        };
        let bank = NoiseBank::synthetic(&aug, crate::rng::derive_seed(seed, &[3]))?;
        for (i, u) in corpus.utterances.iter_mut().enumerate() {
            let mut rng = stream(seed, &[4, i as u64]);
            let (spec, _) = sample_pair_specs(&aug, &bank, u.waveform.len(), &mut rng)?;
            u.waveform = augment(&u.waveform, &spec, &bank)?;
        }
    }
    Ok(corpus)
}

/// All unordered pairs of evaluation utterances: (is_target, enroll, test).
pub fn all_pairs_trials(corpus: &Corpus) -> Vec<(bool, String, String)> {
    let u = &corpus.utterances;
    let mut trials = Vec::new();
    for i in 0..u.len() {
        for j in (i + 1)..u.len() {
            let target = u[i].speaker_id.is_some() && u[i].speaker_id == u[j].speaker_id;
            trials.push((target, u[i].relative_path.clone(), u[j].relative_path.clone()));
        }
    }
    trials
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes WAV files plus a tab-separated manifest `speaker_id utterance_id relative_path`.
/// Unlabeled utterances use `-` as speaker id.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut f = std::io::BufWriter::new(fs::File::create(&manifest)?);
    for u in &corpus.utterances {
        let path = dir.join(&u.relative_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_wav(&path, &u.waveform)?;
        writeln!(
            f,
            "{}\t{}\t{}",
            u.speaker_id.as_deref().unwrap_or("-"),
            u.utterance_id,
            u.relative_path
        )?;
    }
    f.flush()?;
    Ok(manifest)
}

/// Loads a corpus from `dir/manifest.tsv` (or a manifest path directly).
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = BufReader::new(fs::File::open(&manifest)?);
    let mut utterances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CelError::Parse {
                path: manifest.clone(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let speaker_id = (fields[0] != "-").then(|| fields[0].to_string());
        utterances.push(Utterance {
            speaker_id,
            utterance_id: fields[1].to_string(),
            relative_path: fields[2].to_string(),
            waveform: read_wav(&root.join(fields[2]))?,
        });
    }
    Ok(Corpus { utterances })
}

/// Mean un-normalized log-Mel vector of a waveform; used to measure how
/// separable a corpus is before any training.
pub fn mean_logmel(w: &Waveform) -> Result<Vec<f64>> {
    let cfg = FeatureConfig {
        mean_norm: false,
        ..FeatureConfig::default()
    };
    let f = crate::features::logmel(w, &cfg)?;
    Ok((0..f.n_mels())
        .map(|b| (0..f.frames()).map(|t| f.get(b, t)).sum::<f64>() / f.frames() as f64)
        .collect())
}
