//! Verification metrics: DET curves, equal error rate, and the minimum
//! normalized detection cost.
//!
//! A trial is accepted when its score is at or above the threshold. The
//! DET curve is evaluated at every distinct score plus the two infinite
//! endpoints; EER interpolates linearly between the two DET points that
//! bracket the FAR = FRR crossing. The detection cost is normalized by
//! min(c_miss * p_target, c_fa * (1 - p_target)) so a system that always
//! accepts or always rejects scores exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{DcaError, Result};

/// Target = the two sides of the trial share an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialLabel {
    Nontarget,
    Target,
}

impl TrialLabel {
    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(TrialLabel::Nontarget),
            1 => Ok(TrialLabel::Target),
            other => Err(DcaError::InvalidParameter(format!(
                "trial label flag must be 0 or 1, got {other}"
            ))),
        }
    }

    pub fn flag(&self) -> u8 {
        match self {
            TrialLabel::Nontarget => 0,
            TrialLabel::Target => 1,
        }
    }
}

/// One scored verification trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
    pub score: f64,
}

/// An ordered list of scored trials with unique id pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    trials: Vec<TrialScore>,
}

impl ScoreSet {
    /// Build from trials, rejecting duplicate (enroll, test) pairs and
    /// non-finite scores.
    pub fn new(trials: Vec<TrialScore>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, t) in trials.iter().enumerate() {
            if !t.score.is_finite() {
                return Err(DcaError::NonFinite("trial score"));
            }
            if !seen.insert((t.enroll_id.clone(), t.test_id.clone())) {
                return Err(DcaError::InvalidParameter(format!(
                    "duplicate trial pair ({}, {}) at index {i}",
                    t.enroll_id, t.test_id
                )));
            }
        }
        Ok(ScoreSet { trials })
    }

    pub fn trials(&self) -> &[TrialScore] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    fn split_scores(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for t in &self.trials {
            match t.label {
                TrialLabel::Target => targets.push(t.score),
                TrialLabel::Nontarget => nontargets.push(t.score),
            }
        }
        if targets.is_empty() || nontargets.is_empty() {
            return Err(DcaError::InsufficientTrials);
        }
        Ok((targets, nontargets))
    }
}

/// One operating point of the DET curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// DET curve evaluated at every distinct score and both infinite
/// endpoints, in increasing threshold order. FAR is non-increasing and FRR
/// non-decreasing along the curve.
pub fn det_curve(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (targets, nontargets) = scores.split_scores()?;
    let mut thresholds: Vec<f64> = targets.iter().chain(&nontargets).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let n_t = targets.len() as f64;
    let n_n = nontargets.len() as f64;
    let points = thresholds
        .into_iter()
        .map(|threshold| {
            let accepted_nontargets = nontargets.iter().filter(|&&s| s >= threshold).count();
            let rejected_targets = targets.iter().filter(|&&s| s < threshold).count();
            DetPoint {
                threshold,
                far: accepted_nontargets as f64 / n_n,
                frr: rejected_targets as f64 / n_t,
            }
        })
        .collect();
    Ok(points)
}

/// Equal error rate: the FAR (= FRR) value where the two DET rates cross,
/// linearly interpolated between the bracketing DET points. Returns the
/// rate and the crossing threshold.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let points = det_curve(scores)?;
    Ok(eer_from_points(&points))
}

fn eer_from_points(points: &[DetPoint]) -> (f64, f64) {
    // diff = far - frr starts at +1 and ends at -1
    for window in points.windows(2) {
        let (a, b) = (window[0], window[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return (a.far, a.threshold);
        }
        if da > 0.0 && db <= 0.0 {
            if db == 0.0 {
                return (b.far, b.threshold);
            }
            let t = da / (da - db);
            let eer = a.far + t * (b.far - a.far);
            let threshold = if a.threshold.is_finite() && b.threshold.is_finite() {
                a.threshold + t * (b.threshold - a.threshold)
            } else if a.threshold.is_finite() {
                a.threshold
            } else {
                b.threshold
            };
            return (eer, threshold);
        }
    }
    // with >= 1 target and >= 1 nontarget the crossing always exists
    unreachable!("DET curve has no FAR/FRR crossing");
}

/// Minimum normalized detection cost over all DET thresholds:
/// min over tau of
///   (c_miss * FRR(tau) * p_target + c_fa * FAR(tau) * (1 - p_target))
///     / min(c_miss * p_target, c_fa * (1 - p_target)).
/// Returns the cost and its threshold.
pub fn compute_min_dcf(
    scores: &ScoreSet,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> Result<(f64, f64)> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(DcaError::InvalidParameter(format!(
            "p_target must be in (0, 1), got {p_target}"
        )));
    }
    if !(c_miss > 0.0 && c_fa > 0.0) {
        return Err(DcaError::InvalidParameter(format!(
            "detection costs must be positive, got c_miss={c_miss}, c_fa={c_fa}"
        )));
    }
    let points = det_curve(scores)?;
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    let mut best = f64::INFINITY;
    let mut best_threshold = f64::NEG_INFINITY;
    for p in &points {
        let cost = (c_miss * p.frr * p_target + c_fa * p.far * (1.0 - p_target)) / norm;
        if cost < best {
            best = cost;
            best_threshold = p.threshold;
        }
    }
    Ok((best, best_threshold))
}

/// Default cost parameters: p_target 0.05, unit miss and false-alarm costs.
pub const DEFAULT_P_TARGET: f64 = 0.05;
pub const DEFAULT_C_MISS: f64 = 1.0;
pub const DEFAULT_C_FA: f64 = 1.0;

/// Weighted score-level fusion of two score sets over the same trials:
/// fused = weight * a + (1 - weight) * b.
pub fn fuse_scores(a: &ScoreSet, b: &ScoreSet, weight: f64) -> Result<ScoreSet> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(DcaError::InvalidParameter(format!(
            "fusion weight must be in [0, 1], got {weight}"
        )));
    }
    if a.len() != b.len() {
        return Err(DcaError::MisalignedTrials {
            index: a.len().min(b.len()),
            detail: format!("length {} vs {}", a.len(), b.len()),
        });
    }
    let mut fused = Vec::with_capacity(a.len());
    for (i, (ta, tb)) in a.trials.iter().zip(&b.trials).enumerate() {
        if ta.enroll_id != tb.enroll_id || ta.test_id != tb.test_id || ta.label != tb.label {
            return Err(DcaError::MisalignedTrials {
                index: i,
                detail: format!(
                    "({}, {}, {:?}) vs ({}, {}, {:?})",
                    ta.enroll_id, ta.test_id, ta.label, tb.enroll_id, tb.test_id, tb.label
                ),
            });
        }
        fused.push(TrialScore {
            enroll_id: ta.enroll_id.clone(),
            test_id: ta.test_id.clone(),
            label: ta.label,
            score: weight * ta.score + (1.0 - weight) * tb.score,
        });
    }
    ScoreSet::new(fused)
}
