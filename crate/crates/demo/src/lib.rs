//! Browser bindings for three small interactive views of the library:
//! points relaxing toward equilibrium on the sphere, the Gaussian potential
//! for different sharpness values, and EER/MinDCF on synthetic score sets.

use cel_core::embedding::{normalize, random_unit};
use cel_core::eval::{det_points, eer, min_dcf, DcfParams, Trial};
use cel_core::losses::{point_set_uniformity, KernelParam};
use cel_core::rng::seeded;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js_err(e: cel_core::CelError) -> JsError {
    JsError::new(&e.to_string())
}

/// Points on S^2 descending the uniformity loss by projected gradient steps.
#[wasm_bindgen]
pub struct Sphere {
    points: Vec<Vec<f64>>,
    kernel: KernelParam,
    rng: ChaCha8Rng,
    steps: usize,
}

#[wasm_bindgen]
impl Sphere {
    /// `clustered` starts every point inside a small cap around the north pole.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, t: f64, seed: u64, clustered: bool) -> Result<Sphere, JsError> {
        let kernel = KernelParam::new(t).map_err(js_err)?;
        if n < 2 {
            return Err(JsError::new("need at least two points"));
        }
        let mut rng = seeded(seed);
        let points = (0..n)
            .map(|_| {
                if clustered {
                    let v = [0.3 * rng.sample::<f64, _>(StandardNormal), 0.3 * rng.sample::<f64, _>(StandardNormal), 1.0];
                    normalize(&v).expect("north cap is nonzero").into_inner()
                } else {
                    random_unit(&mut rng, 3)
                }
            })
            .collect();
        Ok(Sphere {
            points,
            kernel,
            rng,
            steps: 0,
        })
    }

    /// Runs `steps` projected gradient steps; returns the loss afterwards.
    pub fn step(&mut self, lr: f64, steps: usize) -> Result<f64, JsError> {
        for _ in 0..steps {
            let (_, grad) = point_set_uniformity(&self.points, self.kernel).map_err(js_err)?;
            for (p, g) in self.points.iter_mut().zip(&grad) {
                let moved: Vec<f64> = p.iter().zip(g).map(|(x, d)| x - lr * d).collect();
                *p = normalize(&moved).map_err(js_err)?.into_inner();
            }
            self.steps += 1;
        }
        self.loss()
    }

    pub fn loss(&self) -> Result<f64, JsError> {
        Ok(point_set_uniformity(&self.points, self.kernel).map_err(js_err)?.0)
    }

    /// Mean loss of `draws` sets of the same size drawn uniformly on the sphere.
    pub fn uniform_reference(&mut self, draws: usize) -> Result<f64, JsError> {
        let n = self.points.len();
        let mut total = 0.0;
        for _ in 0..draws.max(1) {
            let pts: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut self.rng, 3)).collect();
            total += point_set_uniformity(&pts, self.kernel).map_err(js_err)?.0;
        }
        Ok(total / draws.max(1) as f64)
    }

    /// Flat `[x0, y0, z0, x1, ...]`.
    pub fn positions(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// `exp(-t d^2)` sampled at `n` chord lengths `d` evenly spaced in [0, 2].
#[wasm_bindgen]
pub fn potential_curve(t: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let k = KernelParam::new(t).map_err(js_err)?;
    let n = n.max(2);
    Ok((0..n)
        .map(|i| {
            let d = 2.0 * i as f64 / (n - 1) as f64;
            (-k.get() * d * d).exp()
        })
        .collect())
}

/// EER and MinDCF of Gaussian target/nontarget scores separated by `d_prime`.
#[wasm_bindgen]
pub struct ScoreSummary {
    eer: f64,
    eer_threshold: f64,
    min_dcf: f64,
    min_dcf_threshold: f64,
    det: Vec<f64>,
}

#[wasm_bindgen]
impl ScoreSummary {
    pub fn eer(&self) -> f64 {
        self.eer
    }

    pub fn eer_threshold(&self) -> f64 {
        self.eer_threshold
    }

    pub fn min_dcf(&self) -> f64 {
        self.min_dcf
    }

    pub fn min_dcf_threshold(&self) -> f64 {
        self.min_dcf_threshold
    }

    /// Flat `[p_fa0, p_miss0, p_fa1, ...]`.
    pub fn det(&self) -> Vec<f64> {
        self.det.clone()
    }
}

#[wasm_bindgen]
pub fn score_gaussians(
    d_prime: f64,
    targets: usize,
    nontargets: usize,
    p_target: f64,
    seed: u64,
) -> Result<ScoreSummary, JsError> {
    let mut rng = seeded(seed);
    let mut trials = Vec::with_capacity(targets + nontargets);
    for i in 0..targets + nontargets {
        let is_target = i < targets;
        let z: f64 = rng.sample(StandardNormal);
        let mut t = Trial::new(is_target, "", "");
        t.score = Some(z + if is_target { d_prime } else { 0.0 });
        trials.push(t);
    }
    let dcf = DcfParams::new(1.0, 1.0, p_target).map_err(js_err)?;
    let (e, et) = eer(&trials).map_err(js_err)?;
    let (d, dt) = min_dcf(&trials, dcf).map_err(js_err)?;
    let det = det_points(&trials).map_err(js_err)?.into_iter().flat_map(|(a, b)| [a, b]).collect();
    Ok(ScoreSummary {
        eer: e,
        eer_threshold: et,
        min_dcf: d,
        min_dcf_threshold: dt,
        det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clustered_points_spread_out() {
        let mut s = Sphere::new(64, 2.0, 1, true).unwrap();
        let before = s.loss().unwrap();
        let after = s.step(2.0, 100).unwrap();
        assert!(after < before);
        assert_eq!(s.steps(), 100);
        let p = s.positions();
        assert_eq!(p.len(), 64 * 3);
        for v in p.chunks(3) {
            assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn potential_endpoints() {
        let c = potential_curve(2.0, 3).unwrap();
        assert_eq!(c[0], 1.0);
        assert!((c[1] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((c[2] - (-8.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn separated_scores_have_low_error() {
        let far = score_gaussians(6.0, 200, 200, 0.05, 3).unwrap();
        let near = score_gaussians(0.5, 200, 200, 0.05, 3).unwrap();
        assert!(far.eer() < 0.02 && near.eer() > 0.2);
        assert!(far.min_dcf() <= near.min_dcf());
        assert_eq!(far.det().len() % 2, 0);
    }
}
