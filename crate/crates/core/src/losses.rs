//! Contrastive equilibrium objectives over a two-view embedding batch.
//!
//! Every loss returns a [`LossOutput`] holding the scalar value and exact
//! gradients with respect to each raw embedding and to the similarity
//! parameters, so one finite-difference harness can check all of them.

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_with_grad, squared_distance, EmbeddingBatch, SimilarityParams};
use crate::error::{CelError, Result};

/// Sharpness `t` of the Gaussian potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParam(f64);

impl KernelParam {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CelError::InvalidParam(format!("kernel parameter t must be positive, got {t}")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for KernelParam {
    fn default() -> Self {
        Self(2.0)
    }
}

/// Weight of the uniformity term in the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CelWeights {
    lambda: f64,
}

impl CelWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CelError::InvalidParam(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(self) -> f64 {
        self.lambda
    }
}

impl Default for CelWeights {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    Aprot,
    Acont,
}

/// Loss value plus gradients for every input of a two-view loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_view1: Vec<Vec<f64>>,
    pub grad_view2: Vec<Vec<f64>>,
    pub grad_w: f64,
    pub grad_b: f64,
}

impl LossOutput {
    fn zeros(k: usize, m: usize) -> Self {
        Self {
            value: 0.0,
            grad_view1: vec![vec![0.0; m]; k],
            grad_view2: vec![vec![0.0; m]; k],
            grad_w: 0.0,
            grad_b: 0.0,
        }
    }

    /// `alpha * self + other`, applied to the value and every gradient.
    pub fn scaled_add(&self, alpha: f64, other: &LossOutput) -> LossOutput {
        let comb = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            a.iter()
                .zip(b)
                .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| alpha * x + y).collect())
                .collect()
        };
        LossOutput {
            value: alpha * self.value + other.value,
            grad_view1: comb(&self.grad_view1, &other.grad_view1),
            grad_view2: comb(&self.grad_view2, &other.grad_view2),
            grad_w: alpha * self.grad_w + other.grad_w,
            grad_b: alpha * self.grad_b + other.grad_b,
        }
    }
}

/// `exp(-t * |a - b|^2)`.
pub fn gaussian_potential(a: &[f64], b: &[f64], k: KernelParam) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CelError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok((-k.get() * squared_distance(a, b)).exp())
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `0.5 * log(mean_{i<j} G_t(x_i, x_j))` over one view, accumulating its
/// gradient into `grad`.
fn half_uniformity(rows: &[Vec<f64>], t: f64, grad: &mut [Vec<f64>]) -> f64 {
    let k = rows.len();
    let pairs = k * (k - 1) / 2;
    let mut exponents = Vec::with_capacity(pairs);
    for i in 0..k {
        for j in (i + 1)..k {
            exponents.push(-t * squared_distance(&rows[i], &rows[j]));
        }
    }
    let lse = log_sum_exp(&exponents);
    let value = 0.5 * (lse - (pairs as f64).ln());

    // d/dx_i of 0.5 * log(sum g) = 0.5 * sum_j (g_ij / sum g) * (-2t) (x_i - x_j)
    let mut idx = 0;
    for i in 0..k {
        for j in (i + 1)..k {
            let weight = (exponents[idx] - lse).exp();
            idx += 1;
            let coeff = -t * weight;
            for d in 0..rows[i].len() {
                let diff = rows[i][d] - rows[j][d];
                grad[i][d] += coeff * diff;
                grad[j][d] -= coeff * diff;
            }
        }
    }
    value
}

/// Batch uniformity loss: half the log mean pairwise potential within each view.
pub fn uniformity_loss(batch: &EmbeddingBatch, k: KernelParam) -> Result<LossOutput> {
    let kk = batch.k();
    if kk < 2 {
        return Err(CelError::BatchTooSmall { k: kk });
    }
    let mut out = LossOutput::zeros(kk, batch.dim());
    let v1 = half_uniformity(batch.view1(), k.get(), &mut out.grad_view1);
    let v2 = half_uniformity(batch.view2(), k.get(), &mut out.grad_view2);
    out.value = v1 + v2;
    Ok(out)
}

/// `log mean_{i<j} G_t(x_i, x_j)` over one point set with its gradient; equals
/// [`uniformity_loss`] on a batch whose two views are both `points`.
pub fn point_set_uniformity(points: &[Vec<f64>], k: KernelParam) -> Result<(f64, Vec<Vec<f64>>)> {
    if points.len() < 2 {
        return Err(CelError::BatchTooSmall { k: points.len() });
    }
    let m = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != m) {
        return Err(CelError::DimensionMismatch {
            expected: m,
            found: bad.len(),
        });
    }
    let mut grad = vec![vec![0.0; m]; points.len()];
    let half = half_uniformity(points, k.get(), &mut grad);
    for g in grad.iter_mut().flatten() {
        *g *= 2.0;
    }
    Ok((2.0 * half, grad))
}

struct CrossSimilarity {
    k: usize,
    cos: Vec<f64>,
    // d cos_ij / d view1_i and d cos_ij / d view2_j, row-major over (i, j)
    grad_a: Vec<Vec<f64>>,
    grad_b: Vec<Vec<f64>>,
}

impl CrossSimilarity {
    fn new(batch: &EmbeddingBatch) -> Self {
        let k = batch.k();
        let mut cos = Vec::with_capacity(k * k);
        let mut grad_a = Vec::with_capacity(k * k);
        let mut grad_b = Vec::with_capacity(k * k);
        for a in batch.view1() {
            for b in batch.view2() {
                let (c, ga, gb) = cosine_with_grad(a, b);
                cos.push(c);
                grad_a.push(ga);
                grad_b.push(gb);
            }
        }
        Self { k, cos, grad_a, grad_b }
    }

    fn scores(&self, p: SimilarityParams) -> Vec<f64> {
        self.cos.iter().map(|c| p.w * c + p.b).collect()
    }

    /// Pushes `dL/dS_ij` back to the embeddings and (w, b).
    fn backprop(&self, d_scores: &[f64], p: SimilarityParams, out: &mut LossOutput) {
        let k = self.k;
        for i in 0..k {
            for j in 0..k {
                let idx = i * k + j;
                let g = d_scores[idx];
                out.grad_w += g * self.cos[idx];
                out.grad_b += g;
                let gc = g * p.w;
                for (acc, v) in out.grad_view1[i].iter_mut().zip(&self.grad_a[idx]) {
                    *acc += gc * v;
                }
                for (acc, v) in out.grad_view2[j].iter_mut().zip(&self.grad_b[idx]) {
                    *acc += gc * v;
                }
            }
        }
    }
}

/// Adds `weight * (-log softmax(scores)[target])` for a set of entries into
/// `d_scores`, returning the term's contribution to the loss value.
fn cross_entropy_term(scores: &[f64], indices: &[usize], target: usize, weight: f64, d_scores: &mut [f64]) -> f64 {
    let logits: Vec<f64> = indices.iter().map(|&ix| scores[ix]).collect();
    let lse = log_sum_exp(&logits);
    for (&ix, &l) in indices.iter().zip(&logits) {
        d_scores[ix] += weight * (l - lse).exp();
    }
    d_scores[indices[target]] -= weight;
    weight * (lse - logits[target])
}

/// Angular prototypical loss: each view-1 anchor classified against all view-2 embeddings.
pub fn aprot_loss(batch: &EmbeddingBatch, p: SimilarityParams) -> Result<LossOutput> {
    let k = batch.k();
    if k < 2 {
        return Err(CelError::BatchTooSmall { k });
    }
    let sim = CrossSimilarity::new(batch);
    let scores = sim.scores(p);
    let mut d_scores = vec![0.0; k * k];
    let weight = 1.0 / k as f64;
    let mut value = 0.0;
    for i in 0..k {
        let row: Vec<usize> = (0..k).map(|j| i * k + j).collect();
        value += cross_entropy_term(&scores, &row, i, weight, &mut d_scores);
    }
    let mut out = LossOutput::zeros(k, batch.dim());
    out.value = value;
    sim.backprop(&d_scores, p, &mut out);
    Ok(out)
}

/// Angular contrastive loss: row-wise and column-wise cross-entropies, each weighted one half.
pub fn acont_loss(batch: &EmbeddingBatch, p: SimilarityParams) -> Result<LossOutput> {
    let k = batch.k();
    if k < 2 {
        return Err(CelError::BatchTooSmall { k });
    }
    let sim = CrossSimilarity::new(batch);
    let scores = sim.scores(p);
    let mut d_scores = vec![0.0; k * k];
    let weight = 0.5 / k as f64;
    let mut row_term = 0.0;
    let mut col_term = 0.0;
    for i in 0..k {
        let row: Vec<usize> = (0..k).map(|j| i * k + j).collect();
        row_term += cross_entropy_term(&scores, &row, i, weight, &mut d_scores);
    }
    for i in 0..k {
        let col: Vec<usize> = (0..k).map(|j| j * k + i).collect();
        col_term += cross_entropy_term(&scores, &col, i, weight, &mut d_scores);
    }
    let mut out = LossOutput::zeros(k, batch.dim());
    out.value = row_term + col_term;
    sim.backprop(&d_scores, p, &mut out);
    Ok(out)
}

pub fn similarity_loss(batch: &EmbeddingBatch, p: SimilarityParams, kind: SimilarityKind) -> Result<LossOutput> {
    match kind {
        SimilarityKind::Aprot => aprot_loss(batch, p),
        SimilarityKind::Acont => acont_loss(batch, p),
    }
}

/// `lambda * uniformity + similarity`.
pub fn total_loss(
    batch: &EmbeddingBatch,
    k: KernelParam,
    p: SimilarityParams,
    weights: CelWeights,
    kind: SimilarityKind,
) -> Result<LossOutput> {
    let unif = uniformity_loss(batch, k)?;
    let sim = similarity_loss(batch, p, kind)?;
    Ok(unif.scaled_add(weights.lambda(), &sim))
}
