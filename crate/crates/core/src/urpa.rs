//! Uncertainty-aware adaptation on a handful of unlabelled target samples.
//!
//! Each target sample gets a pseudo label from the mean of `G` rollouts of the
//! source-trained policy. The spread of those rollouts is the uncertainty `u`,
//! mapped to a confidence `c = exp(-gamma * u)` that scales the accuracy part
//! of the reward during a GRPO pass over the samples.

use std::path::Path;
use std::sync::RwLock;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{to_jsonl, write_atomic};
use crate::envgen::GroundingSample;
use crate::error::{Error, Result};
use crate::grpo::{run_grpo_with, GrpoConfig, StepLog};
use crate::interval::TimeInterval;
use crate::policy::{parse_answer, sample_response, PolicyParams, PolicySnapshot};
use crate::rewards::{source_reward, weighted_target_reward, RewardConfig};
use crate::rng::{self, tag};

/// Rollout-averaged supervision for one unlabelled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub interval: TimeInterval,
    /// Sum of the population stds of the parsed starts and ends.
    pub u: f64,
    /// `exp(-gamma * u)`, floored at the smallest positive normal `f64`.
    pub c: f64,
    pub n_valid: usize,
}

impl PseudoLabel {
    /// Builds a label from parsed rollout intervals; `None` with fewer than two.
    pub fn from_intervals(intervals: &[TimeInterval], gamma: f64) -> Option<Self> {
        if intervals.len() < 2 {
            return None;
        }
        let starts: Vec<f64> = intervals.iter().map(TimeInterval::start).collect();
        let ends: Vec<f64> = intervals.iter().map(TimeInterval::end).collect();
        let (ms, sd_s) = mean_std(&starts);
        let (me, sd_e) = mean_std(&ends);
        // means of valid intervals are ordered and inside [0, 1] up to rounding
        let s = ms.clamp(0.0, 1.0);
        let e = me.clamp(s, 1.0);
        let u = sd_s + sd_e;
        Some(Self {
            interval: TimeInterval::new(s, e).ok()?,
            u,
            c: confidence(u, gamma),
            n_valid: intervals.len(),
        })
    }
}

/// Mean and population std, computed relative to the first value so that
/// identical values give exactly that value and a zero std.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let shift = xs[0];
    let m = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - shift - m).powi(2)).sum::<f64>() / n;
    (shift + m, var.sqrt())
}

/// `exp(-gamma * u)`, kept strictly positive when it would underflow.
pub fn confidence(u: f64, gamma: f64) -> f64 {
    (-gamma * u).exp().max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub k_shots: usize,
    pub gamma: f64,
    /// Rollouts per pseudo label; the GRPO group size when unset.
    pub pseudo_group_size: Option<usize>,
    /// Rebuild pseudo labels from the current policy before every batch.
    pub refresh_pseudo_labels: bool,
    /// Scale the accuracy reward by confidence. Off means `c = 1`.
    pub use_confidence: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k_shots: 200,
            gamma: 10.0,
            pseudo_group_size: None,
            refresh_pseudo_labels: false,
            use_confidence: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shots == 0 {
            return Err(Error::invalid("k_shots must be >= 1"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if self.pseudo_group_size.is_some_and(|g| g < 2) {
            return Err(Error::invalid("pseudo_group_size must be >= 2"));
        }
        Ok(())
    }

    pub fn group_size(&self, grpo: &GrpoConfig) -> usize {
        self.pseudo_group_size.unwrap_or(grpo.group_size)
    }
}

/// Draws `g` rollouts from `snapshot.old` and averages the parseable ones.
/// Returns `None` when fewer than two rollouts parse.
pub fn build_pseudo_label<R: Rng + ?Sized>(
    snapshot: &PolicySnapshot,
    sample: &GroundingSample,
    g: usize,
    gamma: f64,
    rng: &mut R,
) -> Option<PseudoLabel> {
    assert!(g >= 2, "pseudo labels need at least two rollouts");
    let intervals: Vec<TimeInterval> = (0..g)
        .filter_map(|_| parse_answer(&sample_response(snapshot, sample, rng).rendered))
        .map(|a| a.interval)
        .collect();
    PseudoLabel::from_intervals(&intervals, gamma)
}

/// Pseudo labels for a whole sample set, in parallel. Sample `i` draws from
/// the stream `(seed, PSEUDO, round, hash(id))`.
pub fn build_pseudo_labels(
    snapshot: &PolicySnapshot,
    samples: &[GroundingSample],
    g: usize,
    gamma: f64,
    seed: u64,
    round: u64,
) -> Vec<Option<PseudoLabel>> {
    samples
        .par_iter()
        .map(|s| {
            let mut r = rng::stream(seed, &[tag::PSEUDO, round, rng::hash_str(&s.id)]);
            build_pseudo_label(snapshot, s, g, gamma, &mut r)
        })
        .collect()
}

/// One line of the pseudo-label audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub interval: TimeInterval,
    pub u: f64,
    pub c: f64,
    pub n_valid: usize,
}

pub fn write_pseudo_labels(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records)?.as_bytes())
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: PolicyParams,
    pub log: Vec<StepLog>,
    /// Labels built from the source policy before any update.
    pub pseudo_labels: Vec<PseudoLabelRecord>,
    pub n_unusable: usize,
}

/// Confidence-weighted GRPO on the unlabelled target samples, anchored to the
/// source policy.
pub fn adapt_target(
    source: &PolicyParams,
    target_samples: &[GroundingSample],
    grpo: &GrpoConfig,
    adapt: &AdaptConfig,
    rewards: &RewardConfig,
) -> Result<AdaptOutcome> {
    grpo.validate()?;
    adapt.validate()?;
    rewards.validate()?;
    if target_samples.len() != adapt.k_shots {
        return Err(Error::invalid(format!(
            "expected {} target samples, got {}",
            adapt.k_shots,
            target_samples.len()
        )));
    }
    if let Some(s) = target_samples.iter().find(|s| s.gt_interval.is_some()) {
        return Err(Error::invalid(format!(
            "target sample {} carries a label; adaptation must not see labels",
            s.id
        )));
    }
    let snapshot = PolicySnapshot::anchored_at(source.clone());
    snapshot.validate()?;
    let g = adapt.group_size(grpo);

    let initial = build_pseudo_labels(&snapshot, target_samples, g, adapt.gamma, grpo.seed, 0);
    let n_unusable = initial.iter().filter(|l| l.is_none()).count();
    if n_unusable == target_samples.len() {
        return Err(Error::NoUsableSamples {
            unusable: n_unusable,
            total: target_samples.len(),
        });
    }
    let (usable, labels): (Vec<GroundingSample>, Vec<PseudoLabel>) = target_samples
        .iter()
        .zip(&initial)
        .filter_map(|(s, l)| l.map(|l| (s.clone(), l)))
        .unzip();
    let pseudo_labels = usable
        .iter()
        .zip(&labels)
        .map(|(s, l)| PseudoLabelRecord {
            id: s.id.clone(),
            interval: l.interval,
            u: l.u,
            c: l.c,
            n_valid: l.n_valid,
        })
        .collect();

    let current = RwLock::new(labels);
    let refresh = |snap: &PolicySnapshot, batch: &[usize], step: usize| -> Result<()> {
        if !adapt.refresh_pseudo_labels {
            return Ok(());
        }
        let picked: Vec<GroundingSample> = batch.iter().map(|&i| usable[i].clone()).collect();
        let fresh = build_pseudo_labels(snap, &picked, g, adapt.gamma, grpo.seed, step as u64 + 1);
        let mut labels = current.write().expect("pseudo-label lock poisoned");
        for (&i, l) in batch.iter().zip(fresh) {
            // a sample whose rollouts stop parsing keeps its previous label
            if let Some(l) = l {
                labels[i] = l;
            }
        }
        Ok(())
    };
    let score = |i: usize, r: &crate::policy::TokenResponse| {
        let label = current.read().expect("pseudo-label lock poisoned")[i];
        if adapt.use_confidence {
            weighted_target_reward(&r.rendered, &label, rewards)
        } else {
            source_reward(&r.rendered, &label.interval, rewards)
        }
    };
    let outcome = run_grpo_with(snapshot, &usable, grpo, refresh, score)?;
    Ok(AdaptOutcome {
        params: outcome.params,
        log: outcome.log,
        pseudo_labels,
        n_unusable,
    })
}
