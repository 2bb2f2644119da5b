//! Format, relaxed-tIoU and combined rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{relax, tiou, TimeInterval};
use crate::policy::{format_regex, parse_answer};
use crate::urpa::PseudoLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Boundary relaxation as a fraction of the labelled duration.
    pub alpha: f64,
    pub w_format: f64,
    pub w_acc: f64,
    /// Decay of confidence with rollout uncertainty.
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            w_format: 0.5,
            w_acc: 0.5,
            gamma: 10.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be >= 0"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if !(self.w_format >= 0.0 && self.w_acc >= 0.0)
            || (self.w_format + self.w_acc - 1.0).abs() > 1e-12
        {
            return Err(Error::invalid("reward weights must be >= 0 and sum to 1"));
        }
        Ok(())
    }
}

/// Per-rollout reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_tiou: f64,
    /// 1 when the accuracy term is unweighted.
    pub confidence: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn combine(r_format: f64, r_tiou: f64, confidence: f64, cfg: &RewardConfig) -> Self {
        Self {
            r_format,
            r_tiou,
            confidence,
            total: cfg.w_format * r_format + cfg.w_acc * r_tiou * confidence,
        }
    }
}

/// 1 when the response matches the response template, else 0.
pub fn format_reward(rendered: &str) -> f64 {
    if format_regex().is_match(rendered) {
        1.0
    } else {
        0.0
    }
}

/// tIoU against the relaxed label; a missing prediction scores 0.
pub fn accuracy_reward(pred: Option<&TimeInterval>, gt: &TimeInterval, alpha: f64) -> Result<f64> {
    let relaxed = relax(gt, alpha)?;
    Ok(pred.map_or(0.0, |p| tiou(p, &relaxed)))
}

fn score_against(rendered: &str, gt: &TimeInterval, confidence: f64, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    let pred = parse_answer(rendered).map(|a| a.interval);
    let r_format = format_reward(rendered);
    let r_tiou = accuracy_reward(pred.as_ref(), gt, cfg.alpha)?;
    Ok(RewardBreakdown::combine(r_format, r_tiou, confidence, cfg))
}

/// Supervised reward on labelled source data.
pub fn source_reward(rendered: &str, gt: &TimeInterval, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    score_against(rendered, gt, 1.0, cfg)
}

/// Target reward against a pseudo label; only the accuracy term is scaled by
/// the pseudo label's confidence.
pub fn weighted_target_reward(
    rendered: &str,
    pseudo: &PseudoLabel,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    if !(pseudo.c > 0.0 && pseudo.c <= 1.0) {
        return Err(Error::invalid(format!(
            "pseudo-label confidence must lie in (0, 1], got {}",
            pseudo.c
        )));
    }
    score_against(rendered, &pseudo.interval, pseudo.c, cfg)
}
