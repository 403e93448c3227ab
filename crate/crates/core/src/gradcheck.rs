//! Central finite-difference verification of every analytic gradient.
//!
//! Each check draws random instances (K <= 8, m <= 16), flattens every
//! differentiable input into one vector, and compares the analytic gradient
//! with `(f(x + h e_i) - f(x - h e_i)) / 2h`. The error of an instance is
//! `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)` in the
//! Euclidean norm, which stays meaningful when single coordinates are tiny.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{normalize, EmbeddingBatch, SimilarityParams};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{CelError, Result};
use crate::features::FeatureMatrix;
use crate::finetune::{
    adacos_loss, arcface_loss, cosface_loss, ge2e_loss, AdaCosState, ClassifierWeights, LabeledBatch, LabeledLossOutput,
    MarginConfig,
};
use crate::losses::{aprot_loss, acont_loss, total_loss, uniformity_loss, CelWeights, KernelParam, LossOutput, SimilarityKind};
use crate::rng::stream;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    Unif,
    Aprot,
    Acont,
    Total,
    Ge2e,
    Cosface,
    Arcface,
    Adacos,
    Encoder,
}

impl GradScope {
    const CHECKS: [GradScope; 9] = [
        GradScope::Unif,
        GradScope::Aprot,
        GradScope::Acont,
        GradScope::Total,
        GradScope::Ge2e,
        GradScope::Cosface,
        GradScope::Arcface,
        GradScope::Adacos,
        GradScope::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradScope::All => "all",
            GradScope::Unif => "unif",
            GradScope::Aprot => "aprot",
            GradScope::Acont => "acont",
            GradScope::Total => "total",
            GradScope::Ge2e => "ge2e",
            GradScope::Cosface => "cosface",
            GradScope::Arcface => "arcface",
            GradScope::Adacos => "adacos",
            GradScope::Encoder => "encoder",
        }
    }
}

impl FromStr for GradScope {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(GradScope::All)
            .chain(GradScope::CHECKS)
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CelError::InvalidParam(format!("unknown gradcheck scope `{s}`")))
    }
}

/// Outcome of one loss's check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst_instance: usize,
    /// Coordinate with the largest absolute disagreement in the worst instance.
    pub worst_coordinate: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} {:>4} {:>12.3e}  {}",
            self.name,
            self.instances,
            self.max_rel_error,
            if self.passed() { "ok".to_string() } else { format!("FAIL at {} (instance {})", self.worst_coordinate, self.worst_instance) }
        )
    }
}

/// Names flat coordinates by segment, e.g. `view1[2][0]`.
struct Layout(Vec<(String, usize, usize)>);

impl Layout {
    fn new() -> Self {
        Layout(Vec::new())
    }

    fn rows(mut self, name: &str, rows: usize, cols: usize) -> Self {
        self.0.push((name.to_string(), rows, cols));
        self
    }

    fn scalar(self, name: &str) -> Self {
        self.rows(name, 1, 0)
    }

    fn describe(&self, mut i: usize) -> String {
        for (name, rows, cols) in &self.0 {
            let size = if *cols == 0 { 1 } else { rows * cols };
            if i < size {
                return if *cols == 0 { name.clone() } else { format!("{name}[{}][{}]", i / cols, i % cols) };
            }
            i -= size;
        }
        format!("#{i}")
    }
}

struct Instance {
    rel_error: f64,
    worst: String,
}

fn compare(x0: &[f64], analytic: &[f64], layout: &Layout, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Instance> {
    let mut x = x0.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(&x)?;
        x[i] = orig - FD_STEP;
        let down = f(&x)?;
        x[i] = orig;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
    let worst = (0..x0.len())
        .max_by(|&a, &b| (analytic[a] - numeric[a]).abs().total_cmp(&(analytic[b] - numeric[b]).abs()))
        .map(|i| layout.describe(i))
        .unwrap_or_default();
    Ok(Instance { rel_error, worst })
}

fn unit(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&v).expect("gaussian draw is nonzero").into_inner()
}

fn rows_of(flat: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn random_similarity(rng: &mut ChaCha8Rng) -> SimilarityParams {
    SimilarityParams {
        w: rng.random_range(2.0..15.0),
        b: rng.random_range(-8.0..2.0),
    }
}

fn pair_check(
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&EmbeddingBatch, SimilarityParams) -> Result<LossOutput>,
    with_params: bool,
) -> Result<Instance> {
    let k = rng.random_range(2..=8);
    let m = rng.random_range(2..=16);
    let v1: Vec<Vec<f64>> = (0..k).map(|_| unit(rng, m)).collect();
    let v2: Vec<Vec<f64>> = (0..k).map(|_| unit(rng, m)).collect();
    let p = random_similarity(rng);
    let out = loss(&EmbeddingBatch::new(v1.clone(), v2.clone())?, p)?;
    let mut x0: Vec<f64> = v1.iter().chain(&v2).flatten().copied().collect();
    let mut analytic: Vec<f64> = out.grad_view1.iter().chain(&out.grad_view2).flatten().copied().collect();
    let mut layout = Layout::new().rows("view1", k, m).rows("view2", k, m);
    if with_params {
        x0.extend([p.w, p.b]);
        analytic.extend([out.grad_w, out.grad_b]);
        layout = layout.scalar("w").scalar("b");
    }
    let n = k * m;
    compare(&x0, &analytic, &layout, |x| {
        let batch = EmbeddingBatch::new(rows_of(&x[..n], k, m), rows_of(&x[n..2 * n], k, m))?;
        let q = if with_params { SimilarityParams { w: x[2 * n], b: x[2 * n + 1] } } else { p };
        Ok(loss(&batch, q)?.value)
    })
}

fn ge2e_check(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let s = rng.random_range(2..=4);
    let u = rng.random_range(2..=8 / s);
    let m = rng.random_range(2..=16);
    let n = s * u;
    let emb: Vec<Vec<f64>> = (0..n).map(|_| unit(rng, m)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i / u).collect();
    let p = random_similarity(rng);
    let out = ge2e_loss(&LabeledBatch::new(emb.clone(), labels.clone(), s)?, p)?;
    let mut x0: Vec<f64> = emb.iter().flatten().copied().collect();
    x0.extend([p.w, p.b]);
    let mut analytic: Vec<f64> = out.grad_embeddings.iter().flatten().copied().collect();
    analytic.extend([out.grad_w, out.grad_b]);
    let layout = Layout::new().rows("emb", n, m).scalar("w").scalar("b");
    compare(&x0, &analytic, &layout, |x| {
        let batch = LabeledBatch::new(rows_of(x, n, m), labels.clone(), s)?;
        Ok(ge2e_loss(&batch, SimilarityParams { w: x[n * m], b: x[n * m + 1] })?.value)
    })
}

fn classifier_check(
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&LabeledBatch, &ClassifierWeights, f64, f64) -> Result<LabeledLossOutput>,
) -> Result<Instance> {
    let n = rng.random_range(2..=8);
    let classes = rng.random_range(2..=6);
    let m = rng.random_range(2..=16);
    let emb: Vec<Vec<f64>> = (0..n).map(|_| unit(rng, m)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let rows: Vec<Vec<f64>> = (0..classes).map(|_| unit(rng, m)).collect();
    let margin = rng.random_range(0.05..0.5);
    let scale = rng.random_range(5.0..30.0);
    let out = loss(&LabeledBatch::new(emb.clone(), labels.clone(), classes)?, &ClassifierWeights::new(rows.clone())?, margin, scale)?;
    let x0: Vec<f64> = emb.iter().chain(&rows).flatten().copied().collect();
    let mut analytic: Vec<f64> = out.grad_embeddings.iter().flatten().copied().collect();
    analytic.extend(out.grad_weights.as_ref().expect("classifier loss returns weight gradients").iter().flatten());
    let layout = Layout::new().rows("emb", n, m).rows("weights", classes, m);
    compare(&x0, &analytic, &layout, |x| {
        let batch = LabeledBatch::new(rows_of(&x[..n * m], n, m), labels.clone(), classes)?;
        let w = ClassifierWeights::new(rows_of(&x[n * m..], classes, m))?;
        Ok(loss(&batch, &w, margin, scale)?.value)
    })
}

const KINK_MARGIN: f64 = 1e-3;

fn encoder_check(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = EncoderConfig {
        input_dim: 5,
        hidden: vec![6, 6],
        embedding_dim: 4,
        ..EncoderConfig::default()
    };
    let k = 3;
    let frames = 8;
    let enc = Encoder::new(cfg.clone(), rng)?;
    let feats: Vec<FeatureMatrix> = (0..2 * k)
        .map(|_| {
            let f = (0..frames).map(|_| (0..5).map(|_| rng.sample(StandardNormal)).collect()).collect();
            FeatureMatrix::from_frames(5, f)
        })
        .collect::<Result<_>>()?;
    let p = random_similarity(rng);
    let kernel = KernelParam::new(2.0)?;
    let weights = CelWeights::new(1.0)?;
    let loss_of = |e: &Encoder| -> Result<(LossOutput, Vec<crate::encoder::ForwardCache>)> {
        let caches = feats.iter().map(|f| e.forward(f)).collect::<Result<Vec<_>>>()?;
        let emb: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding().to_vec()).collect();
        let batch = EmbeddingBatch::new(emb[..k].to_vec(), emb[k..].to_vec())?;
        Ok((total_loss(&batch, kernel, p, weights, SimilarityKind::Aprot)?, caches))
    };
    let (out, caches) = loss_of(&enc)?;
    // a finite-difference step across a ReLU kink measures the kink, not the gradient
    if caches.iter().any(|c| c.kink_margin() < KINK_MARGIN) {
        return encoder_check(rng);
    }
    let mut analytic = vec![0.0; enc.params().len()];
    for (i, c) in caches.iter().enumerate() {
        let g = if i < k { &out.grad_view1[i] } else { &out.grad_view2[i - k] };
        for (a, v) in analytic.iter_mut().zip(enc.backward(g, c)?.params) {
            *a += v;
        }
    }
    let layout = Layout::new().rows("param", 1, enc.params().len());
    compare(enc.params(), &analytic, &layout, |x| {
        let e = Encoder::from_params(cfg.clone(), x.to_vec())?;
        Ok(loss_of(&e)?.0.value)
    })
}

fn run_one(scope: GradScope, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let kernel = KernelParam::new(2.0)?;
    match scope {
        GradScope::Unif => pair_check(rng, |b, _| uniformity_loss(b, kernel), false),
        GradScope::Aprot => pair_check(rng, aprot_loss, true),
        GradScope::Acont => pair_check(rng, acont_loss, true),
        GradScope::Total => {
            let lambda = rng.random_range(0.1..2.0);
            let kind = if rng.random_bool(0.5) { SimilarityKind::Aprot } else { SimilarityKind::Acont };
            pair_check(rng, |b, p| total_loss(b, kernel, p, CelWeights::new(lambda)?, kind), true)
        }
        GradScope::Ge2e => ge2e_check(rng),
        GradScope::Cosface => classifier_check(rng, |b, w, m, s| cosface_loss(b, w, MarginConfig { margin: m, scale: s })),
        GradScope::Arcface => classifier_check(rng, |b, w, m, s| arcface_loss(b, w, MarginConfig { margin: m, scale: s })),
        GradScope::Adacos => classifier_check(rng, |b, w, _, s| adacos_loss(b, w, &mut AdaCosState::fixed(s))),
        GradScope::Encoder => encoder_check(rng),
        GradScope::All => unreachable!("expanded by run_gradcheck"),
    }
}

/// Runs `instances` random checks per selected loss.
pub fn run_gradcheck(scope: GradScope, seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let selected: Vec<GradScope> = if scope == GradScope::All { GradScope::CHECKS.to_vec() } else { vec![scope] };
    selected
        .into_iter()
        .enumerate()
        .map(|(si, s)| {
            let mut rng = stream(seed, &[si as u64, s.name().len() as u64]);
            let mut report = CheckReport {
                name: s.name(),
                instances,
                max_rel_error: 0.0,
                tolerance: TOLERANCE,
                worst_instance: 0,
                worst_coordinate: String::new(),
            };
            for i in 0..instances {
                let inst = run_one(s, &mut rng)?;
                if inst.rel_error > report.max_rel_error || i == 0 {
                    report.max_rel_error = inst.rel_error;
                    report.worst_instance = i;
                    report.worst_coordinate = inst.worst;
                }
            }
            Ok(report)
        })
        .collect()
}
