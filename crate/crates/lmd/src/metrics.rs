//! Evaluation mathematics for the detection experiments: score-variation
//! sets, FAR/FRR/EER, DSR at a tolerated FAR, SNR-budget filtering, DET
//! curves, minDCF, and attack success rate.
//!
//! Everything here is pure math over score lists; computing the scores
//! themselves (model + transform) lives in the detector and pipeline code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty score set: {0}")]
    Empty(&'static str),
    #[error("paired sets differ in length: {0} vs {1}")]
    PairMismatch(usize, usize),
    #[error("far_given {0} outside [0, 1]")]
    BadFar(f64),
    #[error("non-finite or negative variation value {0}")]
    BadVariation(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariationOrigin {
    Genuine,
    Adversarial,
}

/// One score variation υ = |s − ŝ| per trial, with bookkeeping for the
/// SNR-budget filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationSet {
    pub origin: VariationOrigin,
    pub values: Vec<f64>,
    /// Per-trial SNR of the (adversarial or matched-noise) perturbation, dB.
    pub snrs: Vec<f64>,
    pub trial_ids: Vec<String>,
}

impl VariationSet {
    pub fn new(
        origin: VariationOrigin,
        values: Vec<f64>,
        snrs: Vec<f64>,
        trial_ids: Vec<String>,
    ) -> Result<Self, MetricsError> {
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(MetricsError::BadVariation(v));
            }
        }
        if values.len() != snrs.len() || values.len() != trial_ids.len() {
            return Err(MetricsError::PairMismatch(values.len(), snrs.len()));
        }
        Ok(VariationSet { origin, values, snrs, trial_ids })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Fraction of genuine variations strictly above τ (false alarms).
pub fn far(v_gen: &[f64], tau: f64) -> f64 {
    v_gen.iter().filter(|&&v| v > tau).count() as f64 / v_gen.len() as f64
}

/// Fraction of adversarial variations at or below τ (missed detections).
pub fn frr(v_adv: &[f64], tau: f64) -> f64 {
    v_adv.iter().filter(|&&v| v <= tau).count() as f64 / v_adv.len() as f64
}

/// Candidate thresholds: midpoints between consecutive pooled sorted values,
/// bracketed by sentinels strictly below and above every value.
fn candidate_thresholds(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut cands = vec![pooled[0] - 1.0];
    for w in pooled.windows(2) {
        if w[1] > w[0] {
            cands.push(0.5 * (w[0] + w[1]));
        }
    }
    cands.push(pooled[pooled.len() - 1] + 1.0);
    cands
}

/// Equal error rate of the detector and the crossing threshold.
///
/// FAR(τ) is swept over candidate thresholds; the EER is taken by linear
/// interpolation where the (FAR, FRR) staircase crosses the diagonal.
pub fn eer(v_gen: &[f64], v_adv: &[f64]) -> Result<(f64, f64), MetricsError> {
    if v_gen.is_empty() {
        return Err(MetricsError::Empty("genuine"));
    }
    if v_adv.is_empty() {
        return Err(MetricsError::Empty("adversarial"));
    }
    let cands = candidate_thresholds(v_gen, v_adv);
    let mut prev: Option<(f64, f64, f64)> = None; // (tau, far, frr)
    for &tau in &cands {
        let fa = far(v_gen, tau);
        let fr = frr(v_adv, tau);
        if fa <= fr {
            return Ok(match prev {
                // Crossed between the previous candidate and this one:
                // intersect the segment with the FAR = FRR diagonal.
                Some((tau0, fa0, fr0)) if fa < fr => {
                    let d0 = fa0 - fr0;
                    let d1 = fa - fr;
                    let t = d0 / (d0 - d1);
                    ((fa0 + t * (fa - fa0)).clamp(0.0, 1.0), tau0 + t * (tau - tau0))
                }
                _ => (fa, tau),
            });
        }
        prev = Some((tau, fa, fr));
    }
    // FAR > FRR even above all values is impossible: FAR there is 0.
    unreachable!("FAR/FRR sweep must cross");
}

/// Detection success rate at a tolerated false-alarm rate.
///
/// τ_det minimizes |FAR(τ) − far_given| over candidate thresholds capped at
/// the maximum genuine value (so a zero-FAR request sits at the top genuine
/// value rather than above every adversarial score), breaking ties toward
/// the larger threshold; DSR is the fraction of adversarial variations above
/// τ_det.
pub fn dsr_at_far(
    v_gen: &[f64],
    v_adv: &[f64],
    far_given: f64,
) -> Result<(f64, f64), MetricsError> {
    if v_gen.is_empty() {
        return Err(MetricsError::Empty("genuine"));
    }
    if v_adv.is_empty() {
        return Err(MetricsError::Empty("adversarial"));
    }
    if !(0.0..=1.0).contains(&far_given) {
        return Err(MetricsError::BadFar(far_given));
    }
    let cap = v_gen.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut cands: Vec<f64> = candidate_thresholds(v_gen, v_adv)
        .into_iter()
        .filter(|&t| t <= cap)
        .collect();
    cands.push(cap);
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for &tau in &cands {
        let gap = (far(v_gen, tau) - far_given).abs();
        if gap < best.0 || (gap == best.0 && tau > best.1) {
            best = (gap, tau);
        }
    }
    let tau_det = best.1;
    Ok((v_adv.iter().filter(|&&v| v > tau_det).count() as f64 / v_adv.len() as f64, tau_det))
}

/// Pair-retention rule for the SNR-budget curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetRule {
    /// Keep pair i iff p_adv,i ≥ b or p_gen,i ≥ b (the rule as printed).
    Or,
    /// Stricter variant for sensitivity analysis.
    And,
}

/// EER over the pairs retained at SNR budget `b`; `None` when nothing
/// survives the filter (the plotted curve simply stops there).
pub fn snr_budget_eer(
    adv: &VariationSet,
    gen: &VariationSet,
    b: f64,
    rule: BudgetRule,
) -> Result<Option<(f64, f64)>, MetricsError> {
    if adv.len() != gen.len() {
        return Err(MetricsError::PairMismatch(adv.len(), gen.len()));
    }
    let mut kept_adv = Vec::new();
    let mut kept_gen = Vec::new();
    for i in 0..adv.len() {
        let keep = match rule {
            BudgetRule::Or => adv.snrs[i] >= b || gen.snrs[i] >= b,
            BudgetRule::And => adv.snrs[i] >= b && gen.snrs[i] >= b,
        };
        if keep {
            kept_adv.push(adv.values[i]);
            kept_gen.push(gen.values[i]);
        }
    }
    if kept_adv.is_empty() {
        return Ok(None);
    }
    eer(&kept_gen, &kept_adv).map(Some)
}

/// DET curve: one (FAR, FRR) point per candidate threshold, ordered by
/// ascending threshold (FAR non-increasing, FRR non-decreasing).
pub fn det_curve(v_gen: &[f64], v_adv: &[f64]) -> Vec<(f64, f64)> {
    if v_gen.is_empty() || v_adv.is_empty() {
        return Vec::new();
    }
    candidate_thresholds(v_gen, v_adv)
        .iter()
        .map(|&tau| (far(v_gen, tau), frr(v_adv, tau)))
        .collect()
}

/// Normalized minimum detection cost with C_miss = C_fa = 1.
pub fn min_dcf(
    target_scores: &[f64],
    nontarget_scores: &[f64],
    p_target: f64,
) -> Result<f64, MetricsError> {
    if target_scores.is_empty() {
        return Err(MetricsError::Empty("target"));
    }
    if nontarget_scores.is_empty() {
        return Err(MetricsError::Empty("nontarget"));
    }
    let norm = p_target.min(1.0 - p_target);
    let mut best = f64::INFINITY;
    for tau in candidate_thresholds(target_scores, nontarget_scores) {
        let p_miss =
            target_scores.iter().filter(|&&s| s <= tau).count() as f64 / target_scores.len() as f64;
        let p_fa = nontarget_scores.iter().filter(|&&s| s > tau).count() as f64
            / nontarget_scores.len() as f64;
        best = best.min(p_target * p_miss + (1.0 - p_target) * p_fa);
    }
    Ok(best / norm)
}

/// ASV verification EER over raw cosine scores: FAR is the fraction of
/// non-target scores above η, FRR the fraction of target scores at or
/// below η. Returns (eer, η).
pub fn asv_eer(
    target_scores: &[f64],
    nontarget_scores: &[f64],
) -> Result<(f64, f64), MetricsError> {
    // Same sweep as detection EER with the roles mapped: non-target scores
    // play "genuine above τ = false accept", target scores play "at or
    // below τ = false reject".
    eer(nontarget_scores, target_scores)
}

/// Attack success rate: fraction of examples whose ASV score strictly
/// crosses η in the attack direction. `scored` pairs each final score with
/// `true` for impersonation (needs score > η) or `false` for evasion
/// (needs score < η).
pub fn asr(scored: &[(f64, bool)], eta: f64) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let hits = scored
        .iter()
        .filter(|&&(s, imp)| if imp { s > eta } else { s < eta })
        .count();
    hits as f64 / scored.len() as f64
}
