//! Desk-scale front-end encoder: per-frame ReLU MLP, temporal pooling, an
//! affine head and L2 normalization, with hand-written reverse mode.
//!
//! Parameters live in one flat buffer so the optimizer and the checkpoint
//! format can treat them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, MIN_NORM};
use crate::error::{CelError, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub pooling: Pooling,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            hidden: vec![64, 64],
            embedding_dim: 64,
            pooling: Pooling::Mean,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(CelError::InvalidParam("embedding_dim must be at least 2".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.input_dim == 0 {
            return Err(CelError::InvalidParam("need at least one nonempty hidden layer and input_dim > 0".into()));
        }
        Ok(())
    }

    fn pooled_dim(&self) -> usize {
        let h = *self.hidden.last().expect("validated");
        match self.pooling {
            Pooling::Mean => h,
            Pooling::MeanStd => 2 * h,
        }
    }

    /// (fan_in, fan_out) of every affine layer, head last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            shapes.push((prev, h));
            prev = h;
        }
        shapes.push((self.pooled_dim(), self.embedding_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

const STD_EPS: f64 = 1e-5;

/// Encoder parameters plus a version counter that invalidates stale caches.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: Vec<f64>,
    version: u64,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    frames: usize,
    /// layer inputs, frame-major; `inputs[0]` is the feature matrix
    inputs: Vec<Vec<f64>>,
    /// pre-activations of each hidden layer
    pre: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
    pooled: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// Distance of the closest hidden pre-activation to the ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.pre.iter().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Gradients from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub params: Vec<f64>,
    /// Frame-major gradient with respect to the input features.
    pub input: Vec<f64>,
}

fn slots(cfg: &EncoderConfig) -> Vec<LayerSlot> {
    let mut off = 0;
    cfg.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let s = LayerSlot {
                fan_in,
                fan_out,
                w: off,
                b: off + fan_in * fan_out,
            };
            off += fan_in * fan_out + fan_out;
            s
        })
        .collect()
}

/// `out[t][o] = b[o] + sum_i x[t][i] w[o][i]`
fn affine_rows(x: &[f64], frames: usize, w: &[f64], b: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * fan_out);
    for t in 0..frames {
        let row = &x[t * fan_in..(t + 1) * fan_in];
        for o in 0..fan_out {
            out.push(b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], row));
        }
    }
    out
}

impl Encoder {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = vec![0.0; cfg.param_count()];
        for s in slots(&cfg) {
            let limit = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            for p in &mut params[s.w..s.b] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(Self { cfg, params, version: 0 })
    }

    pub fn from_params(cfg: EncoderConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if params.len() != cfg.param_count() {
            return Err(CelError::ShapeMismatch(format!(
                "encoder expects {} parameters, got {}",
                cfg.param_count(),
                params.len()
            )));
        }
        Ok(Self { cfg, params, version: 0 })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn forward(&self, features: &FeatureMatrix) -> Result<ForwardCache> {
        if features.n_mels() != self.cfg.input_dim {
            return Err(CelError::ShapeMismatch(format!(
                "encoder input dim {} but features have {} bands",
                self.cfg.input_dim,
                features.n_mels()
            )));
        }
        let frames = features.frames();
        if frames == 0 {
            return Err(CelError::ShapeMismatch("feature matrix has no frames".into()));
        }
        let slots = slots(&self.cfg);
        let (hidden, head) = slots.split_at(slots.len() - 1);
        let mut inputs = vec![features.as_slice().to_vec()];
        let mut pre = Vec::with_capacity(hidden.len());
        for s in hidden {
            let z = affine_rows(
                inputs.last().unwrap(),
                frames,
                &self.params[s.w..s.b],
                &self.params[s.b..s.b + s.fan_out],
                s.fan_in,
                s.fan_out,
            );
            inputs.push(z.iter().map(|v| v.max(0.0)).collect());
            pre.push(z);
        }
        let h = inputs.last().unwrap();
        let width = hidden.last().unwrap().fan_out;
        let mut mean = vec![0.0; width];
        for t in 0..frames {
            for (m, v) in mean.iter_mut().zip(&h[t * width..(t + 1) * width]) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= frames as f64;
        }
        let mut pooled = mean.clone();
        let mut std = Vec::new();
        if self.cfg.pooling == Pooling::MeanStd {
            let mut var = vec![0.0; width];
            for t in 0..frames {
                for ((acc, v), m) in var.iter_mut().zip(&h[t * width..(t + 1) * width]).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            std = var.iter().map(|v| (v / frames as f64 + STD_EPS).sqrt()).collect();
            pooled.extend_from_slice(&std);
        }
        let s = head[0];
        let v = affine_rows(&pooled, 1, &self.params[s.w..s.b], &self.params[s.b..s.b + s.fan_out], s.fan_in, s.fan_out);
        let norm = dot(&v, &v).sqrt();
        if !(norm > MIN_NORM) {
            return Err(CelError::NormalizationDegenerate { norm });
        }
        let embedding = v.iter().map(|x| x / norm).collect();
        Ok(ForwardCache {
            version: self.version,
            frames,
            inputs,
            pre,
            mean,
            std,
            pooled,
            norm,
            embedding,
        })
    }

    /// Unit embedding for a feature matrix.
    pub fn embed(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.forward(features)?.embedding)
    }

    /// Reverse pass from `dL/d(embedding)`.
    pub fn backward(&self, upstream: &[f64], cache: &ForwardCache) -> Result<EncoderGrads> {
        if cache.version != self.version {
            return Err(CelError::StaleCache);
        }
        if upstream.len() != self.cfg.embedding_dim {
            return Err(CelError::DimensionMismatch {
                expected: self.cfg.embedding_dim,
                found: upstream.len(),
            });
        }
        let frames = cache.frames;
        let mut grads = vec![0.0; self.params.len()];
        let slots = slots(&self.cfg);
        let (hidden, head) = slots.split_at(slots.len() - 1);

        // through the normalization: (I - e e^T) g / |v|
        let e = &cache.embedding;
        let radial = dot(e, upstream);
        let dv: Vec<f64> = upstream.iter().zip(e).map(|(g, ei)| (g - ei * radial) / cache.norm).collect();

        let s = head[0];
        let mut dpooled = vec![0.0; s.fan_in];
        for (o, &g) in dv.iter().enumerate() {
            grads[s.b + o] += g;
            let wrow = &self.params[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
            let grow = &mut grads[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
            for ((gw, p), (dp, w)) in grow.iter_mut().zip(&cache.pooled).zip(dpooled.iter_mut().zip(wrow)) {
                *gw += g * p;
                *dp += g * w;
            }
        }

        let width = hidden.last().unwrap().fan_out;
        let h = cache.inputs.last().unwrap();
        let inv_t = 1.0 / frames as f64;
        let mut dh = vec![0.0; frames * width];
        for t in 0..frames {
            let row = &mut dh[t * width..(t + 1) * width];
            for (d, dm) in row.iter_mut().zip(&dpooled[..width]) {
                *d = dm * inv_t;
            }
            if self.cfg.pooling == Pooling::MeanStd {
                let hrow = &h[t * width..(t + 1) * width];
                for u in 0..width {
                    row[u] += dpooled[width + u] * (hrow[u] - cache.mean[u]) * inv_t / cache.std[u];
                }
            }
        }

        for (l, s) in hidden.iter().enumerate().rev() {
            let z = &cache.pre[l];
            let x = &cache.inputs[l];
            for (d, zv) in dh.iter_mut().zip(z) {
                if *zv <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut dx = vec![0.0; frames * s.fan_in];
            for t in 0..frames {
                let xrow = &x[t * s.fan_in..(t + 1) * s.fan_in];
                let dxrow = &mut dx[t * s.fan_in..(t + 1) * s.fan_in];
                for o in 0..s.fan_out {
                    let g = dh[t * s.fan_out + o];
                    if g == 0.0 {
                        continue;
                    }
                    grads[s.b + o] += g;
                    let wrange = s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in;
                    for (gw, xv) in grads[wrange.clone()].iter_mut().zip(xrow) {
                        *gw += g * xv;
                    }
                    for (dxv, w) in dxrow.iter_mut().zip(&self.params[wrange]) {
                        *dxv += g * w;
                    }
                }
            }
            dh = dx;
        }
        Ok(EncoderGrads { params: grads, input: dh })
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(CelError::ShapeMismatch(format!(
            "optimizer tracks {} parameters, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    if !(state.lr > 0.0) {
        return Err(CelError::InvalidParam(format!("learning rate must be positive, got {}", state.lr)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Stepwise decay: `initial_lr * (1 - decay_fraction)^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_fraction: f64,
    pub period_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_fraction: f64, period_epochs: usize) -> Result<Self> {
        let s = Self {
            initial_lr,
            decay_fraction,
            period_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(self.decay_fraction > 0.0 && self.decay_fraction < 1.0) || self.period_epochs == 0 {
            return Err(CelError::InvalidParam(format!(
                "schedule needs lr > 0, 0 < decay < 1, period >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// 0.001, minus 5% every 10 epochs.
    pub fn pretrain() -> Self {
        Self {
            initial_lr: 0.001,
            decay_fraction: 0.05,
            period_epochs: 10,
        }
    }

    /// 0.001, minus 10% every 10 epochs.
    pub fn finetune() -> Self {
        Self {
            initial_lr: 0.001,
            decay_fraction: 0.10,
            period_epochs: 10,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * (1.0 - self.decay_fraction).powi((epoch / self.period_epochs) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    fn features(rng: &mut impl Rng, dim: usize, frames: usize) -> FeatureMatrix {
        let f = (0..frames).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        FeatureMatrix::from_frames(dim, f).unwrap()
    }

    fn tiny(pooling: Pooling) -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            hidden: vec![6, 7],
            embedding_dim: 4,
            pooling,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn zero_params_are_degenerate() {
        let cfg = tiny(Pooling::Mean);
        let enc = Encoder::from_params(cfg.clone(), vec![0.0; cfg.param_count()]).unwrap();
        let f = features(&mut seeded(1), 5, 3);
        assert!(matches!(enc.forward(&f), Err(CelError::NormalizationDegenerate { .. })));
    }

    #[test]
    fn single_layer_single_frame_composition() {
        let cfg = EncoderConfig {
            input_dim: 2,
            hidden: vec![2],
            embedding_dim: 2,
            pooling: Pooling::Mean,
            activation: Activation::Relu,
        };
        // identity hidden layer, head = [[1, 2], [0, 1]] + [0.5, -1]
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 1.0, 0.5, -1.0];
        let enc = Encoder::from_params(cfg, params).unwrap();
        let f = FeatureMatrix::from_frames(2, vec![vec![3.0, 4.0]]).unwrap();
        let e = enc.embed(&f).unwrap();
        let v: [f64; 2] = [3.0 + 8.0 + 0.5, 4.0 - 1.0];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((e[0] - v[0] / n).abs() < 1e-15 && (e[1] - v[1] / n).abs() < 1e-15);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let mut rng = seeded(2);
        let enc = Encoder::new(EncoderConfig::default(), &mut rng).unwrap();
        for _ in 0..100 {
            let frames = rng.random_range(1..20);
            let f = features(&mut rng, 40, frames);
            let e = enc.embed(&f).unwrap();
            assert!((dot(&e, &e).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn radial_upstream_gives_zero_gradient() {
        let mut rng = seeded(3);
        let enc = Encoder::new(tiny(Pooling::MeanStd), &mut rng).unwrap();
        let f = features(&mut rng, 5, 6);
        let cache = enc.forward(&f).unwrap();
        let up: Vec<f64> = cache.embedding().iter().map(|x| 2.5 * x).collect();
        let g = enc.backward(&up, &cache).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|v| v.abs() < 1e-10));
        let g = enc.backward(&[0.0; 4], &cache).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = seeded(4);
        let mut enc = Encoder::new(tiny(Pooling::Mean), &mut rng).unwrap();
        let cache = enc.forward(&features(&mut rng, 5, 3)).unwrap();
        enc.params_mut()[0] += 0.1;
        assert!(matches!(enc.backward(&[1.0, 0.0, 0.0, 0.0], &cache), Err(CelError::StaleCache)));
    }

    fn fd_check(pooling: Pooling, seed: u64) {
        let mut rng = seeded(seed);
        let cfg = EncoderConfig {
            input_dim: 5,
            hidden: vec![6, 5],
            embedding_dim: 4,
            pooling,
            activation: Activation::Relu,
        };
        let mut enc = Encoder::new(cfg, &mut rng).unwrap();
        // small positive biases keep ReLUs away from their kink
        let f = features(&mut rng, 5, 8);
        let up: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let objective = |enc: &Encoder, f: &FeatureMatrix| dot(&enc.embed(f).unwrap(), &up);
        let cache = enc.forward(&f).unwrap();
        let g = enc.backward(&up, &cache).unwrap();
        let h = 1e-5;
        let n = enc.params().len();
        for i in 0..n {
            let orig = enc.params()[i];
            enc.params_mut()[i] = orig + h;
            let plus = objective(&enc, &f);
            enc.params_mut()[i] = orig - h;
            let minus = objective(&enc, &f);
            enc.params_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * h);
            let err = (num - g.params[i]).abs() / num.abs().max(g.params[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: analytic {} numeric {num}", g.params[i]);
        }
        for i in 0..f.as_slice().len() {
            let mut frames: Vec<Vec<f64>> = (0..f.frames()).map(|t| f.frame(t).to_vec()).collect();
            let (t, b) = (i / 5, i % 5);
            let orig = frames[t][b];
            frames[t][b] = orig + h;
            let plus = objective(&enc, &FeatureMatrix::from_frames(5, frames.clone()).unwrap());
            frames[t][b] = orig - h;
            let minus = objective(&enc, &FeatureMatrix::from_frames(5, frames).unwrap());
            let num = (plus - minus) / (2.0 * h);
            let err = (num - g.input[i]).abs() / num.abs().max(g.input[i].abs()).max(1e-6);
            assert!(err < 1e-5, "input {i}: analytic {} numeric {num}", g.input[i]);
        }
    }

    #[test]
    fn finite_differences_mean_pooling() {
        fd_check(Pooling::Mean, 10);
        fd_check(Pooling::Mean, 11);
    }

    #[test]
    fn finite_differences_mean_std_pooling() {
        fd_check(Pooling::MeanStd, 12);
        fd_check(Pooling::MeanStd, 13);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut st = OptimizerState::new(3, 0.001);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut st, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert!(adam_step(&mut st, &mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = OptimizerState::new(3, 0.001);
        let mut p = vec![0.0; 3];
        adam_step(&mut st, &mut p, &[0.3, -2.0, 1e-3]).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 0.001).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn adam_two_step_trace() {
        let mut st = OptimizerState::new(1, 0.01);
        let mut p = vec![1.0];
        adam_step(&mut st, &mut p, &[0.5]).unwrap();
        adam_step(&mut st, &mut p, &[0.5]).unwrap();
        // hand transcription
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let m1 = (1.0 - b1) * 0.5;
        let v1 = (1.0 - b2) * 0.25;
        let p1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * 0.5;
        let v2 = b2 * v1 + (1.0 - b2) * 0.25;
        let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - p2).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let pre = LrSchedule::pretrain();
        assert_eq!(pre.lr_at(0), 0.001);
        assert!((pre.lr_at(10) - 0.00095).abs() < 1e-15);
        let ft = LrSchedule::finetune();
        assert!((ft.lr_at(25) - 0.00081).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..500 {
            assert!(pre.lr_at(e) <= prev);
            prev = pre.lr_at(e);
        }
        assert!(LrSchedule::new(0.001, 1.0, 10).is_err());
        assert!(LrSchedule::new(0.001, 0.05, 0).is_err());
    }
}
