//! Unit-hypersphere embeddings and the learnable affine cosine similarity.
//!
//! Loss functions operate on raw ambient coordinates so that finite
//! differences can perturb embeddings off the sphere; cosine similarity
//! always divides by both norms, which makes it a no-op on unit vectors but
//! keeps the gradient exact everywhere else.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CelError, Result};

/// Norms at or below this value cannot be normalized.
pub const MIN_NORM: f64 = 1e-12;

/// Lower bound enforced on the similarity scale `w` after each update.
pub const MIN_SCALE: f64 = 1e-3;

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scales `v` onto the unit sphere.
pub fn normalize(v: &[f64]) -> Result<EmbeddingVector> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(CelError::ZeroVector { norm: n });
    }
    // Already unit up to rounding: leave untouched so normalization is idempotent.
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(EmbeddingVector(v.to_vec()));
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(CelError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// A point drawn uniformly from the unit sphere in `m` dimensions.
pub fn random_unit<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u.into_inner();
        }
    }
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    raw_cosine(a.as_slice(), b.as_slice())
}

/// Cosine similarity of arbitrary nonzero vectors, clamped to [-1, 1].
pub fn raw_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let denom = norm(a) * norm(b);
    if !(denom > MIN_NORM) {
        return Err(CelError::ZeroVector { norm: denom });
    }
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Cosine of two raw vectors together with its gradient with respect to each.
///
/// The gradient ignores the clamp; inside (-1, 1) the two agree.
pub(crate) fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y * inv - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x * inv - c * y / (nb * nb))
        .collect();
    (c.clamp(-1.0, 1.0), ga, gb)
}

/// Learnable scale and bias of the affine cosine similarity `w * cos + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityParams {
    pub w: f64,
    pub b: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

impl SimilarityParams {
    pub fn new(w: f64, b: f64) -> Result<Self> {
        if !(w > 0.0) || !b.is_finite() {
            return Err(CelError::InvalidParam(format!(
                "similarity scale must be positive, got w = {w}, b = {b}"
            )));
        }
        Ok(Self { w, b })
    }

    /// Keeps the scale strictly positive after an optimizer update.
    pub fn clamp_scale(&mut self) {
        if !(self.w >= MIN_SCALE) {
            self.w = MIN_SCALE;
        }
    }
}

pub fn affine_similarity(a: &EmbeddingVector, b: &EmbeddingVector, p: SimilarityParams) -> Result<f64> {
    Ok(p.w * cosine(a, b)? + p.b)
}

/// Two augmented views of the same K utterances.
///
/// Rows are raw vectors; index `i` in both views comes from the same source.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    view1: Vec<Vec<f64>>,
    view2: Vec<Vec<f64>>,
}

impl EmbeddingBatch {
    /// Builds a batch from raw rows without normalizing them.
    pub fn new(view1: Vec<Vec<f64>>, view2: Vec<Vec<f64>>) -> Result<Self> {
        if view1.len() != view2.len() {
            return Err(CelError::BatchShapeInvalid(format!(
                "views have {} and {} rows",
                view1.len(),
                view2.len()
            )));
        }
        let k = view1.len();
        if k < 2 {
            return Err(CelError::BatchTooSmall { k });
        }
        let m = view1[0].len();
        if m < 2 {
            return Err(CelError::InvalidParam(format!(
                "embedding dimension must be at least 2, got {m}"
            )));
        }
        for row in view1.iter().chain(&view2) {
            if row.len() != m {
                return Err(CelError::DimensionMismatch {
                    expected: m,
                    found: row.len(),
                });
            }
        }
        Ok(Self { view1, view2 })
    }

    /// Builds a batch after normalizing every row.
    pub fn normalized(view1: &[Vec<f64>], view2: &[Vec<f64>]) -> Result<Self> {
        let unit = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            rows.iter().map(|r| normalize(r).map(EmbeddingVector::into_inner)).collect()
        };
        Self::new(unit(view1)?, unit(view2)?)
    }

    pub fn k(&self) -> usize {
        self.view1.len()
    }

    pub fn dim(&self) -> usize {
        self.view1[0].len()
    }

    pub fn view1(&self) -> &[Vec<f64>] {
        &self.view1
    }

    pub fn view2(&self) -> &[Vec<f64>] {
        &self.view2
    }

    pub fn swapped(&self) -> Self {
        Self {
            view1: self.view2.clone(),
            view2: self.view1.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> EmbeddingVector {
        normalize(v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(unit(&[3.0, 4.0]).as_slice(), &[0.6, 0.8]);
        assert_eq!(unit(&[1.0, 0.0, 0.0]).as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(unit(&[-2.0, 0.0]).as_slice(), &[-1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(normalize(&[0.0, 0.0]), Err(CelError::ZeroVector { .. })));
        assert!(matches!(normalize(&[1e-13, 0.0]), Err(CelError::ZeroVector { .. })));
    }

    #[test]
    fn cosine_examples() {
        let e = unit(&[0.3, -0.2, 0.9]);
        assert!((cosine(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&unit(&[1.0, 0.0]), &unit(&[-1.0, 0.0])).unwrap(), -1.0);
        assert!(matches!(
            cosine(&unit(&[1.0, 0.0]), &unit(&[1.0, 0.0, 0.0])),
            Err(CelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn affine_examples() {
        let a = unit(&[0.5, 0.5]);
        let p = SimilarityParams::new(10.0, -5.0).unwrap();
        assert!((affine_similarity(&a, &a, p).unwrap() - 5.0).abs() < 1e-12);
        let x = unit(&[1.0, 0.0]);
        let y = unit(&[0.0, 1.0]);
        let p = SimilarityParams::new(2.0, 0.5).unwrap();
        assert_eq!(affine_similarity(&x, &y, p).unwrap(), 0.5);
        let p = SimilarityParams::new(1.0, 0.0).unwrap();
        assert_eq!(affine_similarity(&x, &unit(&[-1.0, 0.0]), p).unwrap(), -1.0);
        assert!(SimilarityParams::new(0.0, 0.0).is_err());
    }

    #[test]
    fn scale_clamp() {
        let mut p = SimilarityParams { w: -3.0, b: 1.0 };
        p.clamp_scale();
        assert_eq!(p.w, MIN_SCALE);
    }

    #[test]
    fn batch_shape_checks() {
        let r = vec![vec![1.0, 0.0]];
        assert!(matches!(
            EmbeddingBatch::new(r.clone(), r),
            Err(CelError::BatchTooSmall { k: 1 })
        ));
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![1.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert!(EmbeddingBatch::new(a.clone(), b).is_err());
        assert!(EmbeddingBatch::new(a.clone(), a).is_ok());
    }

    fn raw_vec(m: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, m).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_unit(v in raw_vec(7)) {
            let once = normalize(&v).unwrap();
            prop_assert!((norm(once.as_slice()) - 1.0).abs() < 1e-9);
            let twice = normalize(once.as_slice()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            u in raw_vec(5), v in raw_vec(5), alpha in 0.01f64..100.0, beta in 0.01f64..100.0
        ) {
            let (a, b) = (unit(&u), unit(&v));
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            let su: Vec<f64> = u.iter().map(|x| x * alpha).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * beta).collect();
            let scaled = cosine(&unit(&su), &unit(&sv)).unwrap();
            prop_assert!((scaled - cosine(&a, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn affine_monotone_in_cosine(
            u in raw_vec(4), v in raw_vec(4), z in raw_vec(4), w in 0.01f64..50.0, b in -10.0f64..10.0
        ) {
            let p = SimilarityParams::new(w, b).unwrap();
            let (a, x, y) = (unit(&u), unit(&v), unit(&z));
            let (cx, cy) = (cosine(&a, &x).unwrap(), cosine(&a, &y).unwrap());
            let (sx, sy) = (affine_similarity(&a, &x, p).unwrap(), affine_similarity(&a, &y, p).unwrap());
            if cx < cy { prop_assert!(sx <= sy); }
            if cx > cy { prop_assert!(sx >= sy); }
        }
    }
}
