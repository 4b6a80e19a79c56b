use serde::{Deserialize, Serialize};

use super::action::EnvAction;
use super::media::{GopPlan, LatencyBreakdown, PerQuality};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QoeParams {
    pub quality_weights: PerQuality<f64>,
    /// β_th,q in bits per tile.
    pub bitrate_thresholds: PerQuality<f64>,
    pub switch_penalty: f64,
    pub qoe_min: f64,
    pub fairness_weight: f64,
    pub violation_weight: f64,
    /// Base of the logarithm in the quality score.
    pub log_base: f64,
}

impl Default for QoeParams {
    fn default() -> Self {
        QoeParams::with_max_bitrates(PerQuality::new(12.4e6, 1.4e6, 0.5e6))
    }
}

impl QoeParams {
    /// Thresholds at a quarter of each quality's maximum bitrate.
    pub fn with_max_bitrates(max: PerQuality<f64>) -> Self {
        QoeParams {
            quality_weights: PerQuality::new(3.0, 2.0, 1.0),
            bitrate_thresholds: max.map(|b| 0.25 * b),
            switch_penalty: 0.5,
            qoe_min: 4.0,
            fairness_weight: 2.0,
            violation_weight: 2.0,
            log_base: std::f64::consts::E,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.quality_weights;
        let ok = 0.0 <= w.low
            && w.low < w.med
            && w.med < w.high
            && self.bitrate_thresholds.to_array().iter().all(|&b| b > 0.0)
            && self.switch_penalty >= 0.0
            && self.fairness_weight >= 0.0
            && self.violation_weight >= 0.0
            && self.log_base > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid QoE parameters {self:?}")))
        }
    }
}

/// S = Σ_q (w_q·M_q/M_total)·log(1 + β_q/β_th,q); zero for an empty GoP.
pub fn quality_score(plan: &GopPlan, params: &QoeParams) -> f64 {
    let total = plan.tile_counts.total();
    if total == 0 {
        return 0.0;
    }
    let ln_base = params.log_base.ln();
    let terms = plan
        .tile_counts
        .as_f64()
        .zip(params.quality_weights, |m, w| w * m / f64::from(total))
        .zip(plan.bitrates().zip(params.bitrate_thresholds, |b, th| (b / th).ln_1p() / ln_base), |a, b| a * b);
    terms.sum()
}

pub fn switch_amplitude(current: PerQuality<f64>, prev: PerQuality<f64>) -> f64 {
    current.zip(prev, |a, b| (a - b).abs()).sum()
}

pub fn qoe(plan: &GopPlan, prev_ratios: PerQuality<f64>, lat: &LatencyBreakdown, params: &QoeParams) -> f64 {
    let s = quality_score(plan, params);
    (1.0 - lat.total_s / lat.threshold_s) * s
        - params.switch_penalty * switch_amplitude(plan.resolution_ratios, prev_ratios)
}

pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// σ_f + σ_b + σ_g over users.
pub fn fairness_penalty(action: &EnvAction) -> f64 {
    let col =
        |f: fn(&super::action::UserAction) -> f64| population_std(&action.users.iter().map(f).collect::<Vec<_>>());
    col(|u| u.cpu_share) + col(|u| u.bw_share) + col(|u| u.gpu_share)
}

pub fn violation_count(qoes: &[f64], qoe_min: f64) -> usize {
    qoes.iter().filter(|&&q| q < qoe_min).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub qoe_sum: f64,
    pub fairness: f64,
    pub violations: usize,
    pub reward: f64,
}

/// `extra_violations` counts users flagged by the latency sentinel whose QoE
/// is nonetheless at or above the minimum.
pub fn reward_terms(
    qoes: &[f64],
    action: &EnvAction,
    params: &QoeParams,
    extra_violations: usize,
) -> Result<RewardTerms> {
    if qoes.len() != action.users.len() {
        return Err(Error::shape(format!("{} QoE values for {} users", qoes.len(), action.users.len())));
    }
    let qoe_sum: f64 = qoes.iter().sum();
    let fairness = fairness_penalty(action);
    let violations = violation_count(qoes, params.qoe_min) + extra_violations;
    let reward = qoe_sum - params.fairness_weight * fairness - params.violation_weight * violations as f64;
    Ok(RewardTerms { qoe_sum, fairness, violations, reward })
}

pub fn reward(qoes: &[f64], action: &EnvAction, params: &QoeParams) -> Result<f64> {
    Ok(reward_terms(qoes, action, params, 0)?.reward)
}
