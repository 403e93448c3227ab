//! Verification back end: cosine trial scoring, EER, MinDCF and DET points.
//!
//! A trial is accepted iff `score >= threshold`. Thresholds are swept over
//! every distinct score plus one point above all scores, which yields the
//! operating-point staircase shared by all three metrics.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::raw_cosine;
use crate::error::{CelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub is_target: bool,
    pub score: Option<f64>,
}

impl Trial {
    pub fn new(is_target: bool, enroll_id: impl Into<String>, test_id: impl Into<String>) -> Self {
        Self {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            is_target,
            score: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.05,
        }
    }
}

impl DcfParams {
    pub fn new(c_miss: f64, c_fa: f64, p_target: f64) -> Result<Self> {
        if !(c_miss > 0.0 && c_fa > 0.0 && p_target > 0.0 && p_target < 1.0) {
            return Err(CelError::InvalidParam(format!(
                "DCF needs positive costs and 0 < p_target < 1, got ({c_miss}, {c_fa}, {p_target})"
            )));
        }
        Ok(Self { c_miss, c_fa, p_target })
    }
}

/// Scores every trial by the cosine of its two embeddings, preserving order.
pub fn score_trials(embeddings: &HashMap<String, Vec<f64>>, trials: &[Trial]) -> Result<Vec<Trial>> {
    trials
        .iter()
        .map(|t| {
            let a = embeddings.get(&t.enroll_id).ok_or_else(|| CelError::UnknownId(t.enroll_id.clone()))?;
            let b = embeddings.get(&t.test_id).ok_or_else(|| CelError::UnknownId(t.test_id.clone()))?;
            Ok(Trial {
                score: Some(raw_cosine(a, b)?),
                ..t.clone()
            })
        })
        .collect()
}

/// One point of the FA/miss staircase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// `f64::INFINITY` for the reject-everything point.
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

fn split_scores(trials: &[Trial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in trials {
        let s = t
            .score
            .ok_or(CelError::DegenerateTrials("trial has no score"))?;
        if s.is_nan() {
            return Err(CelError::DegenerateTrials("trial score is NaN"));
        }
        if t.is_target {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    Ok((targets, nontargets))
}

/// Operating points for ascending distinct thresholds, then the point above all scores.
pub fn operating_points(targets: &[f64], nontargets: &[f64]) -> Result<Vec<OperatingPoint>> {
    if targets.is_empty() {
        return Err(CelError::DegenerateTrials("no target trials"));
    }
    if nontargets.is_empty() {
        return Err(CelError::DegenerateTrials("no nontarget trials"));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut points = Vec::new();
    // counts of trials strictly below the current threshold
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        points.push(OperatingPoint {
            threshold,
            p_fa: (nontargets.len() - non_below) as f64 / nn,
            p_miss: tar_below as f64 / nt,
        });
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_fa: 0.0,
        p_miss: 1.0,
    });
    Ok(points)
}

/// Equal error rate where the FA and miss staircases cross, linearly
/// interpolated between adjacent points when the crossing falls between them.
///
/// Returns `(eer, threshold)`. A crossing next to the reject-all point
/// reports the highest score as its threshold.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    let pts = operating_points(targets, nontargets)?;
    let k = pts
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("last point has p_miss = 1 > p_fa = 0");
    let cur = pts[k];
    if cur.p_miss == cur.p_fa {
        return Ok((cur.p_fa, cur.threshold));
    }
    let prev = pts[k - 1];
    let d_prev = prev.p_fa - prev.p_miss;
    let d_cur = cur.p_fa - cur.p_miss;
    let alpha = d_prev / (d_prev - d_cur);
    let eer = prev.p_fa + alpha * (cur.p_fa - prev.p_fa);
    let hi = if cur.threshold.is_finite() { cur.threshold } else { prev.threshold };
    Ok((eer, prev.threshold + alpha * (hi - prev.threshold)))
}

pub fn eer(trials: &[Trial]) -> Result<(f64, f64)> {
    let (t, n) = split_scores(trials)?;
    eer_from_scores(&t, &n)
}

/// Normalized minimum detection cost and the threshold attaining it.
pub fn min_dcf_from_scores(targets: &[f64], nontargets: &[f64], p: DcfParams) -> Result<(f64, f64)> {
    let pts = operating_points(targets, nontargets)?;
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    let mut best = (f64::INFINITY, f64::NAN);
    for pt in pts {
        let dcf = p.c_miss * p.p_target * pt.p_miss + p.c_fa * (1.0 - p.p_target) * pt.p_fa;
        if dcf < best.0 {
            best = (dcf, pt.threshold);
        }
    }
    Ok((best.0 / norm, best.1))
}

pub fn min_dcf(trials: &[Trial], p: DcfParams) -> Result<(f64, f64)> {
    let (t, n) = split_scores(trials)?;
    min_dcf_from_scores(&t, &n, p)
}

/// `(p_fa, p_miss)` per distinct threshold plus the reject-all point.
pub fn det_points(trials: &[Trial]) -> Result<Vec<(f64, f64)>> {
    let (t, n) = split_scores(trials)?;
    Ok(operating_points(&t, &n)?.into_iter().map(|p| (p.p_fa, p.p_miss)).collect())
}

/// Parses `label enroll test` lines (label 1 = target, 0 = nontarget).
pub fn parse_trial_list(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CelError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected `label enroll test`, found {} fields", fields.len())));
        }
        let is_target = match fields[0] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, found `{other}`"))),
        };
        trials.push(Trial::new(is_target, fields[1], fields[2]));
    }
    if trials.is_empty() {
        return Err(CelError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "trial list is empty".into(),
        });
    }
    Ok(trials)
}

pub fn write_trial_list(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in trials {
        writeln!(f, "{} {} {}", t.is_target as u8, t.enroll_id, t.test_id)?;
    }
    f.flush()?;
    Ok(())
}

/// Trial lines with the score appended.
pub fn write_scores(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for t in trials {
        let s = t.score.ok_or(CelError::DegenerateTrials("trial has no score"))?;
        writeln!(f, "{} {} {} {:.8}", t.is_target as u8, t.enroll_id, t.test_id, s)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_det_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "p_fa,p_miss")?;
    for (fa, miss) in points {
        writeln!(f, "{fa},{miss}")?;
    }
    f.flush()?;
    Ok(())
}
