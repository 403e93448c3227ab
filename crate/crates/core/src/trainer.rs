//! Training loops: CEL pre-training on dual-crop batches and supervised
//! fine-tuning, plus checkpointing and corpus embedding.
//!
//! Every epoch draws its randomness from a stream derived from
//! `(seed, epoch)` and every batch item from `(epoch stream, utterance)`, so
//! a run resumed from a checkpoint replays the uninterrupted run exactly.
//! Per-item work may run on worker threads; gradients are always summed in
//! batch order.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, crop_two, sample_pair_specs, AugmentConfig, NoiseBank};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::corpus::{all_pairs_trials, Corpus, Utterance};
use crate::embedding::{EmbeddingBatch, SimilarityParams};
use crate::encoder::{adam_step, Encoder, EncoderConfig, ForwardCache, LrSchedule, OptimizerState};
use crate::error::{CelError, Result};
use crate::eval::{eer, min_dcf, score_trials, DcfParams, Trial};
use crate::features::{FeatureConfig, FeatureMatrix, LogMel, Waveform};
use crate::finetune::{
    adacos_loss, arcface_loss, cosface_loss, ge2e_loss, AdaCosState, ClassifierWeights, LabeledBatch, LabeledLossOutput,
    MarginConfig,
};
use crate::losses::{similarity_loss, uniformity_loss, KernelParam, SimilarityKind};
use crate::rng::{derive_seed, hash_id, stream};

const TAG_INIT: u64 = 0x696e;
const TAG_BANK: u64 = 0x626b;
const TAG_EPOCH: u64 = 0x6570;
const TAG_CLASSIFIER: u64 = 0x636c;

/// Feature, augmentation and encoder settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Frontend {
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Utterances per batch (K).
    pub batch_size: usize,
    pub lambda: f64,
    pub t: f64,
    pub similarity: SimilarityKind,
    pub epochs: usize,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub schedule: LrSchedule,
    pub crop_frames: usize,
    pub init_w: f64,
    pub init_b: f64,
    /// When false the uniformity term is neither computed nor logged.
    pub uniformity: bool,
    /// Write measured epoch times into the metric log; off gives byte-stable logs.
    pub record_wall_time: bool,
    /// Worker threads for per-item work; 0 uses every core.
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            lambda: 1.0,
            t: 2.0,
            similarity: SimilarityKind::Aprot,
            epochs: 500,
            seed: 0,
            schedule: LrSchedule::pretrain(),
            crop_frames: 180,
            init_w: 10.0,
            init_b: -5.0,
            uniformity: true,
            record_wall_time: true,
            workers: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CelError::BatchTooSmall { k: self.batch_size });
        }
        KernelParam::new(self.t)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CelError::InvalidParam(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.crop_frames == 0 {
            return Err(CelError::InvalidParam("crop_frames must be positive".into()));
        }
        SimilarityParams::new(self.init_w, self.init_b)?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Aprot,
    Acont,
    Ge2e,
    Cosface,
    Arcface,
    Adacos,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Aprot,
        Objective::Acont,
        Objective::Ge2e,
        Objective::Cosface,
        Objective::Arcface,
        Objective::Adacos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Aprot => "aprot",
            Objective::Acont => "acont",
            Objective::Ge2e => "ge2e",
            Objective::Cosface => "cosface",
            Objective::Arcface => "arcface",
            Objective::Adacos => "adacos",
        }
    }

    pub fn uses_classifier(self) -> bool {
        matches!(self, Objective::Cosface | Objective::Arcface | Objective::Adacos)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CelError::InvalidParam(format!("unknown objective `{s}`")))
    }
}

/// Fine-tuning starting point: fresh weights or a saved encoder.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Init {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

impl TryFrom<String> for Init {
    type Error = CelError;

    fn try_from(s: String) -> Result<Self> {
        Ok(match s.as_str() {
            "random" => Init::Random,
            "" => return Err(CelError::InvalidParam("init must be `random` or a checkpoint path".into())),
            _ => Init::Checkpoint(PathBuf::from(s)),
        })
    }
}

impl From<Init> for String {
    fn from(i: Init) -> String {
        match i {
            Init::Random => "random".into(),
            Init::Checkpoint(p) => p.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub objective: Objective,
    /// Used by cosface and arcface; adacos takes its own scale.
    pub margin: MarginConfig,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub segment_frames: usize,
    pub init: Init,
    pub epochs: usize,
    /// Set from the run seed.
    #[serde(skip)]
    pub seed: u64,
    pub schedule: LrSchedule,
    pub init_w: f64,
    pub init_b: f64,
    pub record_wall_time: bool,
    pub workers: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Aprot,
            margin: MarginConfig::default(),
            speakers_per_batch: 8,
            utterances_per_speaker: 2,
            segment_frames: 300,
            init: Init::Random,
            epochs: 250,
            seed: 0,
            schedule: LrSchedule::finetune(),
            init_w: 10.0,
            init_b: -5.0,
            record_wall_time: true,
            workers: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers_per_batch < 2 {
            return Err(CelError::BatchTooSmall { k: self.speakers_per_batch });
        }
        let min_u = if self.objective.uses_classifier() { 1 } else { 2 };
        if self.utterances_per_speaker < min_u {
            return Err(CelError::BatchShapeInvalid(format!(
                "{} needs at least {min_u} utterances per speaker, got {}",
                self.objective, self.utterances_per_speaker
            )));
        }
        if self.segment_frames == 0 {
            return Err(CelError::InvalidParam("segment_frames must be positive".into()));
        }
        if matches!(self.objective, Objective::Cosface | Objective::Arcface) {
            MarginConfig::new(self.margin.margin, self.margin.scale)?;
        }
        SimilarityParams::new(self.init_w, self.init_b)?;
        self.schedule.validate()
    }
}

/// One metric-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_unif: f64,
    pub loss_sim: f64,
    pub w: f64,
    pub b: f64,
    pub wall_ms: u64,
}

pub const METRIC_HEADER: &str = "epoch\tlr\tloss_total\tloss_unif\tloss_sim\tw\tb\twall_ms";

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.loss_total, self.loss_unif, self.loss_sim, self.w, self.b, self.wall_ms
        )
    }
}

/// Writes a metric log: one `#` label line, the header, then one record per epoch.
pub fn write_metric_log(path: &Path, label: &str, records: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "# {label}")?;
    writeln!(f, "{METRIC_HEADER}")?;
    for r in records {
        writeln!(f, "{r}")?;
    }
    f.flush()?;
    Ok(())
}

/// Parses the records of a metric log written by [`write_metric_log`].
pub fn read_metric_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line == METRIC_HEADER || line.is_empty() {
            continue;
        }
        let err = |msg: String| CelError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number `{s}`: {e}")));
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| err(format!("bad epoch `{}`", f[0])))?,
            lr: num(f[1])?,
            loss_total: num(f[2])?,
            loss_unif: num(f[3])?,
            loss_sim: num(f[4])?,
            w: num(f[5])?,
            b: num(f[6])?,
            wall_ms: f[7].parse().map_err(|_| err(format!("bad wall_ms `{}`", f[7])))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weights: ClassifierWeights,
    pub opt: OptimizerState,
}

/// Everything a training run mutates, and exactly what a checkpoint stores.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: String,
    pub encoder: Encoder,
    pub encoder_opt: OptimizerState,
    pub similarity: SimilarityParams,
    pub similarity_opt: OptimizerState,
    pub classifier: Option<Classifier>,
    pub adacos: Option<AdaCosState>,
    /// Completed epochs.
    pub epoch: usize,
    pub meta: BTreeMap<String, String>,
    /// Front end the encoder was trained on, echoed into checkpoints.
    pub features: Option<FeatureConfig>,
}

fn opt_blocks(ck: &mut Checkpoint, name: &str, opt: &OptimizerState) {
    ck.push(&format!("{name}.adam_m"), opt.m.clone());
    ck.push(&format!("{name}.adam_v"), opt.v.clone());
    ck.push(&format!("{name}.adam_step"), vec![opt.step as f64]);
}

fn restore_opt(ck: &Checkpoint, name: &str, n: usize) -> Result<OptimizerState> {
    let mut opt = OptimizerState::new(n, 1.0);
    let m = ck.require(&format!("{name}.adam_m"))?;
    let v = ck.require(&format!("{name}.adam_v"))?;
    if m.len() != n || v.len() != n {
        return Err(CelError::CheckpointMismatch(format!("{name} optimizer moments have the wrong length")));
    }
    opt.m = m.to_vec();
    opt.v = v.to_vec();
    opt.step = ck.require(&format!("{name}.adam_step"))?.first().copied().unwrap_or(0.0) as u64;
    Ok(opt)
}

impl TrainState {
    fn fresh(stage: &str, encoder: Encoder, similarity: SimilarityParams) -> Self {
        let n = encoder.params().len();
        Self {
            stage: stage.to_string(),
            encoder,
            encoder_opt: OptimizerState::new(n, 1.0),
            similarity,
            similarity_opt: OptimizerState::new(2, 1.0),
            classifier: None,
            adacos: None,
            epoch: 0,
            meta: BTreeMap::new(),
            features: None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointHeader {
            stage: self.stage.clone(),
            epoch: self.epoch,
            encoder: self.encoder.config().clone(),
            meta: self.meta.clone(),
            features: self.features.clone(),
        });
        ck.push("encoder", self.encoder.params().to_vec());
        ck.push("similarity", vec![self.similarity.w, self.similarity.b]);
        opt_blocks(&mut ck, "encoder", &self.encoder_opt);
        opt_blocks(&mut ck, "similarity", &self.similarity_opt);
        if let Some(c) = &self.classifier {
            let rows = c.weights.rows.len();
            let mut flat = vec![rows as f64];
            flat.extend(c.weights.rows.iter().flatten());
            ck.push("classifier", flat);
            opt_blocks(&mut ck, "classifier", &c.opt);
        }
        if let Some(a) = &self.adacos {
            ck.push("adacos", vec![a.scale, a.dynamic as u8 as f64]);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = ck.require("encoder")?.to_vec();
        let encoder = Encoder::from_params(ck.header.encoder.clone(), params)?;
        let n = encoder.params().len();
        let sim = ck.require("similarity")?;
        if sim.len() != 2 {
            return Err(CelError::CheckpointMismatch("similarity block must hold (w, b)".into()));
        }
        let classifier = match ck.block("classifier") {
            Some(flat) => {
                let rows = flat.first().copied().unwrap_or(0.0) as usize;
                let body = &flat[1..];
                if rows == 0 || body.len() % rows != 0 {
                    return Err(CelError::CheckpointMismatch("malformed classifier block".into()));
                }
                let dim = body.len() / rows;
                let weights = ClassifierWeights::new(body.chunks(dim).map(<[f64]>::to_vec).collect())?;
                Some(Classifier {
                    weights,
                    opt: restore_opt(ck, "classifier", body.len())?,
                })
            }
            None => None,
        };
        let adacos = ck.block("adacos").map(|a| AdaCosState {
            scale: a[0],
            dynamic: a.get(1).copied().unwrap_or(1.0) != 0.0,
        });
        Ok(Self {
            stage: ck.header.stage.clone(),
            encoder,
            encoder_opt: restore_opt(ck, "encoder", n)?,
            similarity: SimilarityParams { w: sim[0], b: sim[1] },
            similarity_opt: restore_opt(ck, "similarity", 2)?,
            classifier,
            adacos,
            epoch: ck.header.epoch,
            meta: ck.header.meta.clone(),
            features: ck.header.features.clone(),
        })
    }
}

/// Final state plus the records of the epochs run in this call.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.tsv";

impl TrainRun {
    /// Writes `checkpoint.bin` and `metrics.tsv` into `dir`.
    pub fn write(&self, dir: &Path, label: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.state.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        write_metric_log(&dir.join(METRICS_FILE), label, &self.records)
    }
}

fn run_with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| CelError::InvalidParam(format!("cannot start {workers} workers: {e}")))?;
            return Ok(pool.install(f));
        }
    }
    let _ = workers;
    Ok(f())
}

fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Groups utterance indices into batches of `k` with no group key repeated
/// within a batch. One pass over the shuffled corpus; a short remainder is dropped.
pub fn epoch_batches<R: Rng>(keys: &[String], k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(CelError::BatchTooSmall { k });
    }
    let distinct = keys.iter().collect::<HashSet<_>>().len();
    if distinct < k {
        return Err(CelError::CorpusTooSmall {
            needed: k,
            available: distinct,
        });
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    loop {
        let mut batch = Vec::with_capacity(k);
        let mut used = HashSet::new();
        let mut skipped = Vec::new();
        while let Some(i) = pending.pop_front() {
            if used.insert(&keys[i]) {
                batch.push(i);
                if batch.len() == k {
                    break;
                }
            } else {
                skipped.push(i);
            }
        }
        if batch.len() < k {
            break;
        }
        batches.push(batch);
        for i in skipped.into_iter().rev() {
            pending.push_front(i);
        }
    }
    Ok(batches)
}

/// Batch grouping key: the speaker when known, else the utterance itself.
pub fn grouping_keys(corpus: &Corpus) -> Vec<String> {
    corpus
        .utterances
        .iter()
        .map(|u| u.speaker_id.clone().unwrap_or_else(|| format!("utt:{}", u.utterance_id)))
        .collect()
}

/// Draws one pre-training batch of `k` utterance indices.
pub fn sample_pretrain_batch<R: Rng>(corpus: &Corpus, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let keys = grouping_keys(corpus);
    let distinct = keys.iter().collect::<HashSet<_>>().len();
    if k > distinct {
        return Err(CelError::CorpusTooSmall {
            needed: k,
            available: distinct,
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let mut used = HashSet::new();
    Ok(order.into_iter().filter(|&i| used.insert(&keys[i])).take(k).collect())
}

/// Two featurized, independently augmented crops of one utterance.
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub index: usize,
    pub view1: FeatureMatrix,
    pub view2: FeatureMatrix,
}

/// Crops, augments and featurizes the utterances at `indices`. Each item's
/// randomness comes from `(batch_seed, utterance id)` alone.
pub fn assemble_pretrain_batch(
    corpus: &Corpus,
    indices: &[usize],
    batch_seed: u64,
    crop_frames: usize,
    augment_cfg: &AugmentConfig,
    bank: &NoiseBank,
    logmel: &LogMel,
) -> Result<Vec<PretrainItem>> {
    let crop_len = logmel.config().samples_for_frames(crop_frames);
    par_map(indices, |_, &i| {
        let u = corpus
            .utterances
            .get(i)
            .ok_or_else(|| CelError::UnknownId(format!("utterance index {i}")))?;
        let mut rng = stream(batch_seed, &[hash_id(&u.utterance_id)]);
        let pair = crop_two(&u.waveform, &u.utterance_id, crop_len, augment_cfg.wrap_short, &mut rng)?;
        let (c1, c2) = if augment_cfg.enabled {
            let (s1, s2) = sample_pair_specs(augment_cfg, bank, crop_len, &mut rng)?;
            (augment(&pair.crop1, &s1, bank)?, augment(&pair.crop2, &s2, bank)?)
        } else {
            (pair.crop1, pair.crop2)
        };
        Ok(PretrainItem {
            index: i,
            view1: logmel.compute(&c1)?,
            view2: logmel.compute(&c2)?,
        })
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, &[TAG_EPOCH, epoch as u64])
}

fn backprop_sum(encoder: &Encoder, jobs: &[(&ForwardCache, &[f64])]) -> Result<Vec<f64>> {
    let grads = par_map(jobs, |_, (cache, g)| Ok(encoder.backward(g, cache)?.params))?;
    let mut total = vec![0.0; encoder.params().len()];
    for g in grads {
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
    }
    Ok(total)
}

fn apply_updates(state: &mut TrainState, lr: f64, enc_grad: &[f64], grad_w: f64, grad_b: f64) -> Result<()> {
    state.encoder_opt.lr = lr;
    adam_step(&mut state.encoder_opt, state.encoder.params_mut(), enc_grad)?;
    state.similarity_opt.lr = lr;
    let mut wb = [state.similarity.w, state.similarity.b];
    adam_step(&mut state.similarity_opt, &mut wb, &[grad_w, grad_b])?;
    state.similarity.w = wb[0];
    state.similarity.b = wb[1];
    state.similarity.clamp_scale();
    Ok(())
}

fn fmt_bool(b: bool) -> String {
    b.to_string()
}

/// Fresh pre-training state: Glorot encoder from the run seed.
pub fn init_pretrain(cfg: &PretrainConfig, frontend: &Frontend) -> Result<TrainState> {
    cfg.validate()?;
    let encoder = Encoder::new(frontend.encoder.clone(), &mut stream(cfg.seed, &[TAG_INIT]))?;
    let mut state = TrainState::fresh("pretrain", encoder, SimilarityParams::new(cfg.init_w, cfg.init_b)?);
    state.features = Some(frontend.features.clone());
    state.meta = BTreeMap::from([
        ("batch_size".to_string(), cfg.batch_size.to_string()),
        ("lambda".to_string(), cfg.lambda.to_string()),
        ("t".to_string(), cfg.t.to_string()),
        ("similarity".to_string(), format!("{:?}", cfg.similarity).to_lowercase()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("uniformity".to_string(), fmt_bool(cfg.uniformity)),
    ]);
    Ok(state)
}

/// CEL pre-training from scratch for `cfg.epochs` epochs.
pub fn pretrain(corpus: &Corpus, cfg: &PretrainConfig, frontend: &Frontend) -> Result<TrainRun> {
    let state = init_pretrain(cfg, frontend)?;
    continue_pretrain(state, corpus, cfg, frontend)
}

/// Runs pre-training epochs from `state.epoch` up to `cfg.epochs`.
pub fn continue_pretrain(mut state: TrainState, corpus: &Corpus, cfg: &PretrainConfig, frontend: &Frontend) -> Result<TrainRun> {
    cfg.validate()?;
    if state.encoder.config() != &frontend.encoder {
        return Err(CelError::CheckpointMismatch("encoder config differs from the run config".into()));
    }
    let logmel = LogMel::new(frontend.features.clone())?;
    let bank = if frontend.augment.enabled {
        NoiseBank::load(&frontend.augment, derive_seed(cfg.seed, &[TAG_BANK]))?
    } else {
        NoiseBank {
            noises: Vec::new(),
            rirs: Vec::new(),
        }
    };
    let kernel = KernelParam::new(cfg.t)?;
    let keys = grouping_keys(corpus);
    let mut records = Vec::new();
    run_with_workers(cfg.workers, || -> Result<()> {
        while state.epoch < cfg.epochs {
            let started = Instant::now();
            let epoch = state.epoch;
            let lr = cfg.schedule.lr_at(epoch);
            let seed = epoch_seed(cfg.seed, epoch);
            let batches = epoch_batches(&keys, cfg.batch_size, &mut stream(seed, &[0]))?;
            let (mut sum_total, mut sum_unif, mut sum_sim) = (0.0, 0.0, 0.0);
            for (bi, indices) in batches.iter().enumerate() {
                let items = assemble_pretrain_batch(
                    corpus,
                    indices,
                    derive_seed(seed, &[1, bi as u64]),
                    cfg.crop_frames,
                    &frontend.augment,
                    &bank,
                    &logmel,
                )?;
                let enc = &state.encoder;
                let caches = par_map(&items, |_, it| Ok((enc.forward(&it.view1)?, enc.forward(&it.view2)?)))?;
                let batch = EmbeddingBatch::new(
                    caches.iter().map(|c| c.0.embedding().to_vec()).collect(),
                    caches.iter().map(|c| c.1.embedding().to_vec()).collect(),
                )?;
                let sim = similarity_loss(&batch, state.similarity, cfg.similarity)?;
                let (loss, unif_value) = if cfg.uniformity {
                    let unif = uniformity_loss(&batch, kernel)?;
                    (unif.scaled_add(cfg.lambda, &sim), unif.value)
                } else {
                    (sim.clone(), f64::NAN)
                };
                let mut jobs = Vec::with_capacity(2 * caches.len());
                for (i, (c1, c2)) in caches.iter().enumerate() {
                    jobs.push((c1, loss.grad_view1[i].as_slice()));
                    jobs.push((c2, loss.grad_view2[i].as_slice()));
                }
                let grad = backprop_sum(enc, &jobs)?;
                apply_updates(&mut state, lr, &grad, loss.grad_w, loss.grad_b)?;
                sum_total += loss.value;
                sum_unif += unif_value;
                sum_sim += sim.value;
            }
            let n = batches.len().max(1) as f64;
            state.epoch += 1;
            records.push(EpochRecord {
                epoch: state.epoch,
                lr,
                loss_total: sum_total / n,
                loss_unif: sum_unif / n,
                loss_sim: sum_sim / n,
                w: state.similarity.w,
                b: state.similarity.b,
                wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
            });
            log::info!("pretrain epoch {} loss {:.5}", state.epoch, sum_total / n);
        }
        Ok(())
    })??;
    Ok(TrainRun { state, records })
}

/// Label used on the first line of a pre-training metric log.
pub fn pretrain_label(cfg: &PretrainConfig) -> String {
    let mut label = format!(
        "stage=pretrain similarity={:?} K={} lambda={} t={} seed={}",
        cfg.similarity, cfg.batch_size, cfg.lambda, cfg.t, cfg.seed
    )
    .to_lowercase();
    if cfg.lambda == 0.0 || !cfg.uniformity {
        label.push_str(" ablation=no-uniformity");
    }
    label
}

/// Per-speaker utterance lists in label order.
fn speaker_pools(corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    if !corpus.is_labeled() {
        return Err(CelError::MissingLabels(
            "fine-tuning needs a speaker id on every manifest line".into(),
        ));
    }
    let labels = corpus.labels()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    Ok(pools)
}

/// One fine-tuning batch: `speakers_per_batch` distinct speakers, each with
/// `utterances_per_speaker` distinct utterances, grouped speaker by speaker.
pub fn sample_finetune_batch<R: Rng>(pools: &[Vec<usize>], s: usize, u: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = (0..pools.len()).filter(|&c| pools[c].len() >= u).collect();
    if eligible.len() < s {
        return Err(CelError::CorpusTooSmall {
            needed: s,
            available: eligible.len(),
        });
    }
    let chosen: Vec<usize> = eligible.choose_multiple(rng, s).copied().collect();
    let mut out = Vec::with_capacity(s * u);
    for c in chosen {
        for &i in pools[c].choose_multiple(rng, u) {
            out.push((c, i));
        }
    }
    Ok(out)
}

fn random_segment<R: Rng>(w: &Waveform, len: usize, wrap: bool, rng: &mut R) -> Result<Waveform> {
    Ok(crop_two(w, "", len, wrap, rng)?.crop1)
}

/// Fresh or checkpoint-initialized fine-tuning state.
pub fn init_finetune(corpus: &Corpus, cfg: &FinetuneConfig, frontend: &Frontend) -> Result<TrainState> {
    cfg.validate()?;
    let classes = speaker_pools(corpus)?.len();
    let default_sim = SimilarityParams::new(cfg.init_w, cfg.init_b)?;
    let (encoder, similarity) = match &cfg.init {
        Init::Random => (Encoder::new(frontend.encoder.clone(), &mut stream(cfg.seed, &[TAG_INIT]))?, default_sim),
        Init::Checkpoint(path) => {
            let ck = Checkpoint::load_expecting(path, &frontend.encoder)?;
            let params = ck.require("encoder")?.to_vec();
            let sim = match ck.block("similarity") {
                Some([w, b]) => SimilarityParams::new(*w, *b)?,
                _ => default_sim,
            };
            (Encoder::from_params(frontend.encoder.clone(), params)?, sim)
        }
    };
    let mut state = TrainState::fresh("finetune", encoder, similarity);
    if cfg.objective.uses_classifier() {
        let dim = frontend.encoder.embedding_dim;
        let mut rng = stream(cfg.seed, &[TAG_CLASSIFIER]);
        let limit = (6.0 / (dim + classes) as f64).sqrt();
        let rows = (0..classes)
            .map(|_| (0..dim).map(|_| rng.random_range(-limit..limit)).collect())
            .collect();
        state.classifier = Some(Classifier {
            weights: ClassifierWeights::new(rows)?,
            opt: OptimizerState::new(classes * dim, 1.0),
        });
    }
    if cfg.objective == Objective::Adacos {
        state.adacos = Some(AdaCosState::new(classes)?);
    }
    state.features = Some(frontend.features.clone());
    state.meta = BTreeMap::from([
        ("objective".to_string(), cfg.objective.to_string()),
        ("init".to_string(), String::from(cfg.init.clone())),
        ("seed".to_string(), cfg.seed.to_string()),
        ("speakers_per_batch".to_string(), cfg.speakers_per_batch.to_string()),
        ("utterances_per_speaker".to_string(), cfg.utterances_per_speaker.to_string()),
    ]);
    Ok(state)
}

pub fn finetune(corpus: &Corpus, cfg: &FinetuneConfig, frontend: &Frontend) -> Result<TrainRun> {
    let state = init_finetune(corpus, cfg, frontend)?;
    continue_finetune(state, corpus, cfg, frontend)
}

fn labeled_update(state: &mut TrainState, out: &LabeledLossOutput, lr: f64) -> Result<()> {
    if let (Some(c), Some(gw)) = (state.classifier.as_mut(), out.grad_weights.as_ref()) {
        let flat_grad: Vec<f64> = gw.iter().flatten().copied().collect();
        let mut flat: Vec<f64> = c.weights.rows.iter().flatten().copied().collect();
        c.opt.lr = lr;
        adam_step(&mut c.opt, &mut flat, &flat_grad)?;
        let dim = c.weights.rows[0].len();
        c.weights = ClassifierWeights::new(flat.chunks(dim).map(<[f64]>::to_vec).collect())?;
    }
    Ok(())
}

/// Runs fine-tuning epochs from `state.epoch` up to `cfg.epochs`. An epoch is
/// `floor(N / (S * U))` batches, about one pass over the utterances.
pub fn continue_finetune(mut state: TrainState, corpus: &Corpus, cfg: &FinetuneConfig, frontend: &Frontend) -> Result<TrainRun> {
    cfg.validate()?;
    if state.encoder.config() != &frontend.encoder {
        return Err(CelError::CheckpointMismatch("encoder config differs from the run config".into()));
    }
    let pools = speaker_pools(corpus)?;
    let logmel = LogMel::new(frontend.features.clone())?;
    let seg_len = logmel.config().samples_for_frames(cfg.segment_frames);
    let (s, u) = (cfg.speakers_per_batch, cfg.utterances_per_speaker);
    let batches_per_epoch = (corpus.len() / (s * u)).max(1);
    let classes = pools.len();
    let mut records = Vec::new();
    run_with_workers(cfg.workers, || -> Result<()> {
        while state.epoch < cfg.epochs {
            let started = Instant::now();
            let epoch = state.epoch;
            let lr = cfg.schedule.lr_at(epoch);
            let seed = epoch_seed(cfg.seed, epoch);
            let mut sum = 0.0;
            for bi in 0..batches_per_epoch {
                let picks = sample_finetune_batch(&pools, s, u, &mut stream(seed, &[0, bi as u64]))?;
                let enc = &state.encoder;
                let caches = par_map(&picks, |slot, &(_, i)| {
                    let utt: &Utterance = &corpus.utterances[i];
                    let mut rng = stream(seed, &[1, bi as u64, slot as u64]);
                    let seg = random_segment(&utt.waveform, seg_len, frontend.augment.wrap_short, &mut rng)?;
                    enc.forward(&logmel.compute(&seg)?)
                })?;
                let emb: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding().to_vec()).collect();
                let (value, grad_emb, grad_w, grad_b) = match cfg.objective {
                    Objective::Aprot | Objective::Acont => {
                        let kind = if cfg.objective == Objective::Aprot { SimilarityKind::Aprot } else { SimilarityKind::Acont };
                        let v1 = (0..s).map(|k| emb[k * u].clone()).collect();
                        let v2 = (0..s).map(|k| emb[k * u + 1].clone()).collect();
                        let out = similarity_loss(&EmbeddingBatch::new(v1, v2)?, state.similarity, kind)?;
                        let mut g = vec![vec![0.0; emb[0].len()]; emb.len()];
                        for k in 0..s {
                            g[k * u] = out.grad_view1[k].clone();
                            g[k * u + 1] = out.grad_view2[k].clone();
                        }
                        (out.value, g, out.grad_w, out.grad_b)
                    }
                    Objective::Ge2e => {
                        let labels = (0..s * u).map(|j| j / u).collect();
                        let out = ge2e_loss(&LabeledBatch::new(emb, labels, s)?, state.similarity)?;
                        (out.value, out.grad_embeddings, out.grad_w, out.grad_b)
                    }
                    Objective::Cosface | Objective::Arcface | Objective::Adacos => {
                        let labels = picks.iter().map(|&(c, _)| c).collect();
                        let batch = LabeledBatch::new(emb, labels, classes)?;
                        let weights = &state.classifier.as_ref().expect("classifier initialized").weights;
                        let out = match cfg.objective {
                            Objective::Cosface => cosface_loss(&batch, weights, cfg.margin)?,
                            Objective::Arcface => arcface_loss(&batch, weights, cfg.margin)?,
                            _ => adacos_loss(&batch, weights, state.adacos.as_mut().expect("adacos state"))?,
                        };
                        labeled_update(&mut state, &out, lr)?;
                        (out.value, out.grad_embeddings, 0.0, 0.0)
                    }
                };
                let enc = &state.encoder;
                let jobs: Vec<(&ForwardCache, &[f64])> = caches.iter().zip(&grad_emb).map(|(c, g)| (c, g.as_slice())).collect();
                let grad = backprop_sum(enc, &jobs)?;
                apply_updates(&mut state, lr, &grad, grad_w, grad_b)?;
                sum += value;
            }
            let n = batches_per_epoch as f64;
            state.epoch += 1;
            let (w, b) = match cfg.objective {
                Objective::Cosface | Objective::Arcface => (cfg.margin.scale, cfg.margin.margin),
                Objective::Adacos => (state.adacos.as_ref().map_or(f64::NAN, |a| a.scale), 0.0),
                _ => (state.similarity.w, state.similarity.b),
            };
            records.push(EpochRecord {
                epoch: state.epoch,
                lr,
                loss_total: sum / n,
                loss_unif: f64::NAN,
                loss_sim: sum / n,
                w,
                b,
                wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
            });
            log::info!("finetune[{}] epoch {} loss {:.5}", cfg.objective, state.epoch, sum / n);
        }
        Ok(())
    })??;
    Ok(TrainRun { state, records })
}

pub fn finetune_label(cfg: &FinetuneConfig) -> String {
    format!(
        "stage=finetune objective={} init={} S={} U={} seed={}",
        cfg.objective,
        String::from(cfg.init.clone()),
        cfg.speakers_per_batch,
        cfg.utterances_per_speaker,
        cfg.seed
    )
}

/// Embeds every utterance of a corpus, keyed by relative path.
pub fn embed_corpus(encoder: &Encoder, corpus: &Corpus, features: &FeatureConfig) -> Result<HashMap<String, Vec<f64>>> {
    let logmel = LogMel::new(features.clone())?;
    let embs = par_map(&corpus.utterances, |_, u| encoder.embed(&logmel.compute(&u.waveform)?))?;
    Ok(corpus
        .utterances
        .iter()
        .map(|u| u.relative_path.clone())
        .zip(embs)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub trials: Vec<Trial>,
}

/// Scores all same/different-speaker pairs of a labeled corpus.
pub fn verify(encoder: &Encoder, corpus: &Corpus, features: &FeatureConfig, dcf: DcfParams) -> Result<Verification> {
    let embeddings = embed_corpus(encoder, corpus, features)?;
    let trials: Vec<Trial> = all_pairs_trials(corpus)
        .into_iter()
        .map(|(t, a, b)| Trial::new(t, a, b))
        .collect();
    let trials = score_trials(&embeddings, &trials)?;
    let (e, et) = eer(&trials)?;
    let (d, dt) = min_dcf(&trials, dcf)?;
    Ok(Verification {
        eer: e,
        eer_threshold: et,
        min_dcf: d,
        min_dcf_threshold: dt,
        trials,
    })
}
