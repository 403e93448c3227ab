//! Supervised objectives used after unsupervised pre-training: GE2E and the
//! margin-softmax family (CosFace, ArcFace, AdaCos).

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_with_grad, norm, SimilarityParams};
use crate::error::{CelError, Result};
use crate::losses::log_sum_exp;

/// Cosine is kept inside this open interval before `acos` in ArcFace.
pub const ARC_COS_LIMIT: f64 = 1.0 - 1e-7;

/// Floor applied to the AdaCos scale.
pub const ADACOS_MIN_SCALE: f64 = 1e-3;

/// N labeled embeddings drawn from C classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledBatch {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(CelError::BatchShapeInvalid(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let Some(first) = embeddings.first() else {
            return Err(CelError::BatchShapeInvalid("empty batch".into()));
        };
        let m = first.len();
        if let Some(bad) = embeddings.iter().find(|e| e.len() != m) {
            return Err(CelError::DimensionMismatch {
                expected: m,
                found: bad.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(CelError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            embeddings,
            labels,
            classes,
        })
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

/// Class weight vectors, one row per class. Rows are renormalized inside
/// every margin loss, so the stored rows may have any nonzero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub rows: Vec<Vec<f64>>,
}

impl ClassifierWeights {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(CelError::SingleClass);
        };
        let m = first.len();
        for r in &rows {
            if r.len() != m {
                return Err(CelError::DimensionMismatch {
                    expected: m,
                    found: r.len(),
                });
            }
            if !(norm(r) > crate::embedding::MIN_NORM) {
                return Err(CelError::ZeroVector { norm: norm(r) });
            }
        }
        Ok(Self { rows })
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    /// Unit-norm copy of the weights.
    pub fn renormalized(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let n = norm(r);
                r.iter().map(|x| x / n).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
        }
    }
}

impl MarginConfig {
    pub fn new(margin: f64, scale: f64) -> Result<Self> {
        if !(margin >= 0.0) || !(scale > 0.0) {
            return Err(CelError::InvalidParam(format!(
                "margin must be >= 0 and scale > 0, got m = {margin}, s = {scale}"
            )));
        }
        Ok(Self { margin, scale })
    }
}

/// Loss value plus gradients for a labeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLossOutput {
    pub value: f64,
    pub grad_embeddings: Vec<Vec<f64>>,
    /// Gradient with respect to the stored (unnormalized) classifier rows.
    pub grad_weights: Option<Vec<Vec<f64>>>,
    pub grad_w: f64,
    pub grad_b: f64,
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Softmax GE2E over speaker centroids; the scored utterance is left out of
/// its own speaker's centroid.
///
/// Every label present must occur the same number of times U >= 2, and at
/// least two distinct labels are required.
pub fn ge2e_loss(batch: &LabeledBatch, p: SimilarityParams) -> Result<LabeledLossOutput> {
    // group indices by label, in order of first appearance
    let mut speakers: Vec<(usize, Vec<usize>)> = Vec::new();
    for (idx, &label) in batch.labels().iter().enumerate() {
        match speakers.iter_mut().find(|(l, _)| *l == label) {
            Some((_, members)) => members.push(idx),
            None => speakers.push((label, vec![idx])),
        }
    }
    let s_count = speakers.len();
    let u = speakers[0].1.len();
    if s_count < 2 || u < 2 || speakers.iter().any(|(_, m)| m.len() != u) {
        return Err(CelError::BatchShapeInvalid(format!(
            "GE2E needs S >= 2 speakers with U >= 2 utterances each, got {:?}",
            speakers.iter().map(|(l, m)| (*l, m.len())).collect::<Vec<_>>()
        )));
    }
    let e = batch.embeddings();
    let m = batch.dim();
    let sums: Vec<Vec<f64>> = speakers
        .iter()
        .map(|(_, members)| {
            let mut s = vec![0.0; m];
            for &i in members {
                axpy(&mut s, 1.0, &e[i]);
            }
            s
        })
        .collect();
    let full: Vec<Vec<f64>> = sums.iter().map(|s| s.iter().map(|x| x / u as f64).collect()).collect();

    let n = batch.len();
    let mut out = LabeledLossOutput {
        value: 0.0,
        grad_embeddings: vec![vec![0.0; m]; n],
        grad_weights: None,
        grad_w: 0.0,
        grad_b: 0.0,
    };
    let inv_n = 1.0 / n as f64;
    for (own, (_, members)) in speakers.iter().enumerate() {
        for &i in members {
            let exclusive: Vec<f64> = sums[own]
                .iter()
                .zip(&e[i])
                .map(|(s, x)| (s - x) / (u - 1) as f64)
                .collect();
            let mut cos = Vec::with_capacity(s_count);
            let mut grads = Vec::with_capacity(s_count);
            for (k, other) in full.iter().enumerate() {
                let centroid = if k == own { &exclusive } else { other };
                let (c, ge, gc) = cosine_with_grad(&e[i], centroid);
                cos.push(c);
                grads.push((ge, gc));
            }
            let logits: Vec<f64> = cos.iter().map(|c| p.w * c + p.b).collect();
            let lse = log_sum_exp(&logits);
            out.value += inv_n * (lse - logits[own]);
            for k in 0..s_count {
                let d = inv_n * ((logits[k] - lse).exp() - if k == own { 1.0 } else { 0.0 });
                out.grad_w += d * cos[k];
                out.grad_b += d;
                let dc = d * p.w;
                let (ge, gc) = &grads[k];
                axpy(&mut out.grad_embeddings[i], dc, ge);
                if k == own {
                    // exclusive centroid = (sum - e_i) / (U - 1)
                    let scale = dc / (u - 1) as f64;
                    for &j in members {
                        if j != i {
                            axpy(&mut out.grad_embeddings[j], scale, gc);
                        }
                    }
                } else {
                    let scale = dc / u as f64;
                    for &j in &speakers[k].1 {
                        axpy(&mut out.grad_embeddings[j], scale, gc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// How the target-class logit is formed from the target cosine.
#[derive(Debug, Clone, Copy)]
enum TargetLogit {
    /// `s * (cos - m)`
    Additive { margin: f64 },
    /// `s * cos(acos(cos) + m)`
    Angular { margin: f64 },
}

impl TargetLogit {
    /// Returns (transformed cosine, derivative with respect to the cosine).
    fn apply(self, c: f64) -> (f64, f64) {
        match self {
            TargetLogit::Additive { margin } => (c - margin, 1.0),
            TargetLogit::Angular { margin } => {
                if c >= ARC_COS_LIMIT || c <= -ARC_COS_LIMIT {
                    let cc = c.clamp(-ARC_COS_LIMIT, ARC_COS_LIMIT);
                    return ((cc.acos() + margin).cos(), 0.0);
                }
                let theta = c.acos();
                let phi = theta + margin;
                (phi.cos(), phi.sin() / theta.sin())
            }
        }
    }
}

struct MarginForward {
    value: f64,
    grad_embeddings: Vec<Vec<f64>>,
    grad_weights: Vec<Vec<f64>>,
    /// cosines of every (sample, class) pair, row-major
    cos: Vec<f64>,
}

fn margin_softmax(batch: &LabeledBatch, weights: &ClassifierWeights, scale: f64, target: TargetLogit) -> Result<MarginForward> {
    let c = weights.classes();
    if c != batch.classes() {
        return Err(CelError::ShapeMismatch(format!(
            "classifier has {c} classes, batch declares {}",
            batch.classes()
        )));
    }
    let m = batch.dim();
    if weights.rows[0].len() != m {
        return Err(CelError::DimensionMismatch {
            expected: m,
            found: weights.rows[0].len(),
        });
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut fwd = MarginForward {
        value: 0.0,
        grad_embeddings: vec![vec![0.0; m]; n],
        grad_weights: vec![vec![0.0; m]; c],
        cos: Vec::with_capacity(n * c),
    };
    for (i, (x, &y)) in batch.embeddings().iter().zip(batch.labels()).enumerate() {
        // cosine_with_grad divides by the row norm, which is the renormalization
        let pairs: Vec<(f64, Vec<f64>, Vec<f64>)> = weights.rows.iter().map(|w| cosine_with_grad(x, w)).collect();
        let mut logits = Vec::with_capacity(c);
        let mut dlogit_dcos = Vec::with_capacity(c);
        for (j, (cj, _, _)) in pairs.iter().enumerate() {
            fwd.cos.push(*cj);
            if j == y {
                let (t, dt) = target.apply(*cj);
                logits.push(scale * t);
                dlogit_dcos.push(scale * dt);
            } else {
                logits.push(scale * cj);
                dlogit_dcos.push(scale);
            }
        }
        let lse = log_sum_exp(&logits);
        fwd.value += inv_n * (lse - logits[y]);
        for (j, (_, gx, gw)) in pairs.iter().enumerate() {
            let d = inv_n * ((logits[j] - lse).exp() - if j == y { 1.0 } else { 0.0 });
            let dc = d * dlogit_dcos[j];
            axpy(&mut fwd.grad_embeddings[i], dc, gx);
            axpy(&mut fwd.grad_weights[j], dc, gw);
        }
    }
    Ok(fwd)
}

fn into_output(fwd: MarginForward) -> LabeledLossOutput {
    LabeledLossOutput {
        value: fwd.value,
        grad_embeddings: fwd.grad_embeddings,
        grad_weights: Some(fwd.grad_weights),
        grad_w: 0.0,
        grad_b: 0.0,
    }
}

/// Additive-margin softmax: target logit `s * (cos - m)`.
pub fn cosface_loss(batch: &LabeledBatch, weights: &ClassifierWeights, cfg: MarginConfig) -> Result<LabeledLossOutput> {
    margin_softmax(batch, weights, cfg.scale, TargetLogit::Additive { margin: cfg.margin }).map(into_output)
}

/// Additive angular margin softmax: target logit `s * cos(theta + m)`.
pub fn arcface_loss(batch: &LabeledBatch, weights: &ClassifierWeights, cfg: MarginConfig) -> Result<LabeledLossOutput> {
    margin_softmax(batch, weights, cfg.scale, TargetLogit::Angular { margin: cfg.margin }).map(into_output)
}

/// Scale state for AdaCos. Updated after each forward pass when `dynamic`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaCosState {
    pub scale: f64,
    pub dynamic: bool,
}

impl AdaCosState {
    /// Starts at `sqrt(2) * ln(C - 1)`, floored at [`ADACOS_MIN_SCALE`].
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(CelError::SingleClass);
        }
        let s = std::f64::consts::SQRT_2 * ((classes - 1) as f64).ln();
        if s < ADACOS_MIN_SCALE {
            log::warn!("AdaCos initial scale {s} for {classes} classes is degenerate; using {ADACOS_MIN_SCALE}");
        }
        Ok(Self {
            scale: s.max(ADACOS_MIN_SCALE),
            dynamic: true,
        })
    }

    pub fn fixed(scale: f64) -> Self {
        Self { scale, dynamic: false }
    }
}

/// Lower median, matching the usual framework convention for even counts.
pub(crate) fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[(values.len() - 1) / 2]
}

/// Next AdaCos scale from a batch's cosines:
/// `ln(B_avg) / cos(min(pi/4, median target angle))`, where `B_avg` is the
/// mean over samples of the summed non-target `exp(s * cos)`.
pub fn adacos_next_scale(scale: f64, cos: &[f64], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    let mut b_sum = 0.0;
    let mut target_angles = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..classes {
            let cj = cos[i * classes + j];
            if j == y {
                target_angles.push(cj.clamp(-1.0, 1.0).acos());
            } else {
                b_sum += (scale * cj).exp();
            }
        }
    }
    let b_avg = b_sum / n as f64;
    let theta_med = lower_median(&mut target_angles);
    let next = b_avg.ln() / theta_med.min(std::f64::consts::FRAC_PI_4).cos();
    if next.is_finite() {
        next.max(ADACOS_MIN_SCALE)
    } else {
        scale
    }
}

/// Margin-free scaled softmax whose scale adapts to the batch statistics.
pub fn adacos_loss(batch: &LabeledBatch, weights: &ClassifierWeights, state: &mut AdaCosState) -> Result<LabeledLossOutput> {
    if batch.classes() < 2 {
        return Err(CelError::SingleClass);
    }
    let fwd = margin_softmax(batch, weights, state.scale, TargetLogit::Additive { margin: 0.0 })?;
    if state.dynamic {
        state.scale = adacos_next_scale(state.scale, &fwd.cos, batch.labels(), batch.classes());
    }
    Ok(into_output(fwd))
}
