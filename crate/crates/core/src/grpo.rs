//! Group Relative Policy Optimization.
//!
//! For every sample in a batch, `G` responses are drawn from the behaviour
//! policy, scored, and their rewards standardized within the group into
//! advantages. The policy then takes one gradient-ascent step on
//!
//! ```text
//! sum_samples [ sum_i exp(logp(o_i) - logp_old(o_i)) * A_i  -  beta * KL(pi || pi_ref) ]
//! ```
//!
//! where the KL term is the per-rollout average of the exact sequence KL
//! (summed over visited states). There is no critic.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::GroundingSample;
use crate::error::{Error, Result};
use crate::policy::{
    sample_response, ContextLogits, PolicyParams, PolicySnapshot, SequenceGrad, TokenResponse,
    Weights,
};
use crate::rewards::{source_reward, RewardBreakdown, RewardConfig};
use crate::rng::{self, tag};

/// Log-ratios beyond this magnitude are clamped and counted.
pub const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    /// KL penalty coefficient.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adv_epsilon: f64,
    pub seed: u64,
    /// PPO-style ratio clipping; off unless set.
    pub clip_epsilon: Option<f64>,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 16,
            adv_epsilon: 1e-8,
            seed: 0,
            clip_epsilon: None,
            max_steps: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size must be >= 2"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid("beta must be >= 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.adv_epsilon.is_finite() && self.adv_epsilon >= 0.0) {
            return Err(Error::invalid("adv_epsilon must be >= 0"));
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::invalid("clip_epsilon must be > 0"));
            }
        }
        Ok(())
    }
}

/// `G` scored responses for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub responses: Vec<TokenResponse>,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub logprobs_old: Vec<f64>,
}

/// `A_i = (r_i - mean(r)) / (std(r) + eps)` with the population std.
/// A group with identical rewards gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64], adv_epsilon: f64) -> Vec<f64> {
    assert!(rewards.len() >= 2, "a group needs at least two rewards");
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + adv_epsilon)).collect()
}

/// Value and gradient of one group's surrogate at `snapshot.current`.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub objective: f64,
    /// Mean over rollouts of the sequence KL to the reference.
    pub kl: f64,
    pub gradient: Weights,
    pub clip_events: usize,
}

/// Surrogate objective (maximization convention) and its exact gradient.
pub fn surrogate_objective(
    snapshot: &PolicySnapshot,
    context: &[f64],
    group: &RolloutGroup,
    beta: f64,
    clip_epsilon: Option<f64>,
) -> SurrogateEval {
    let current = &snapshot.current;
    let ctx = ContextLogits::new(current, context);
    let ctx_ref = ContextLogits::new(&snapshot.reference, context);
    let mut acc = SequenceGrad::for_params(current);
    let g = group.responses.len() as f64;
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut clip_events = 0;

    for ((resp, &adv), &lp_old) in group
        .responses
        .iter()
        .zip(&group.advantages)
        .zip(&group.logprobs_old)
    {
        let lp = crate::policy::logprob(current, context, &resp.tokens);
        let raw = lp - lp_old;
        let guarded = raw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        let ratio_is_live = guarded == raw;
        if !ratio_is_live {
            clip_events += 1;
        }
        let ratio = guarded.exp();
        let (term, weight) = match clip_epsilon {
            Some(eps) => {
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
                if ratio * adv <= clipped * adv {
                    (ratio * adv, ratio * adv)
                } else {
                    (clipped * adv, 0.0)
                }
            }
            None => (ratio * adv, ratio * adv),
        };
        objective += term;
        if ratio_is_live {
            acc.add_logprob(current, &ctx, &resp.tokens, weight);
        }
        kl_sum += acc.add_kl(
            current,
            &ctx,
            &snapshot.reference,
            &ctx_ref,
            &resp.tokens,
            -beta / g,
        );
    }
    let kl = kl_sum / g;
    SurrogateEval {
        objective: objective - beta * kl,
        kl,
        gradient: acc.finish(context),
        clip_events,
    }
}

/// One record of the training run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_format: f64,
    pub mean_tiou: f64,
    pub clip_events: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<StepLog>,
}

/// Samples and scores one group from `snapshot.old`.
///
/// Rollout `i` draws from the stream `(seed, ROLLOUT, epoch, hash(id), i)`.
pub fn rollout_group<F>(
    snapshot: &PolicySnapshot,
    sample: &GroundingSample,
    group_size: usize,
    adv_epsilon: f64,
    stream: (u64, u64),
    score: F,
) -> Result<RolloutGroup>
where
    F: Fn(&TokenResponse) -> Result<RewardBreakdown>,
{
    let (seed, epoch) = stream;
    let id_key = rng::hash_str(&sample.id);
    let responses: Vec<TokenResponse> = (0..group_size)
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::ROLLOUT, epoch, id_key, i as u64]);
            sample_response(snapshot, sample, &mut r)
        })
        .collect();
    let breakdowns = responses.iter().map(&score).collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let advantages = compute_advantages(&rewards, adv_epsilon);
    let logprobs_old = responses.iter().map(TokenResponse::logprob).collect();
    Ok(RolloutGroup {
        sample_id: sample.id.clone(),
        responses,
        rewards,
        breakdowns,
        advantages,
        logprobs_old,
    })
}

struct SampleStep {
    gradient: Weights,
    reward: f64,
    kl: f64,
    format: f64,
    tiou: f64,
    clip_events: usize,
}

/// The GRPO loop shared by source training and target adaptation.
///
/// `score(i, response)` rewards a response to `samples[i]`. The reference
/// policy stays `snapshot.reference`; `snapshot.old` is refreshed before every
/// batch.
pub fn run_grpo<F>(
    snapshot: PolicySnapshot,
    samples: &[GroundingSample],
    cfg: &GrpoConfig,
    score: F,
) -> Result<TrainOutcome>
where
    F: Fn(usize, &TokenResponse) -> Result<RewardBreakdown> + Sync,
{
    run_grpo_with(snapshot, samples, cfg, |_, _, _| Ok(()), score)
}

/// [`run_grpo`] with a hook called after `snapshot.old` is refreshed and
/// before the batch (given as sample indices) is rolled out. The third
/// argument is the step index.
pub fn run_grpo_with<H, F>(
    mut snapshot: PolicySnapshot,
    samples: &[GroundingSample],
    cfg: &GrpoConfig,
    mut before_batch: H,
    score: F,
) -> Result<TrainOutcome>
where
    H: FnMut(&PolicySnapshot, &[usize], usize) -> Result<()>,
    F: Fn(usize, &TokenResponse) -> Result<RewardBreakdown> + Sync,
{
    cfg.validate()?;
    snapshot.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if let Some(bad) = samples
        .iter()
        .find(|s| s.context_dim() != snapshot.current.context_dim())
    {
        return Err(Error::invalid(format!(
            "sample {} has context dimension {} but the policy expects {}",
            bad.id,
            bad.context_dim(),
            snapshot.current.context_dim()
        )));
    }

    let mut log = Vec::new();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch]));
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            snapshot.refresh_old();
            before_batch(&snapshot, batch, step)?;
            let snap = &snapshot;
            let per_sample: Vec<SampleStep> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &samples[i];
                    let group = rollout_group(
                        snap,
                        sample,
                        cfg.group_size,
                        cfg.adv_epsilon,
                        (cfg.seed, epoch),
                        |r| score(i, r),
                    )?;
                    let eval =
                        surrogate_objective(snap, &sample.context(), &group, cfg.beta, cfg.clip_epsilon);
                    let n = group.rewards.len() as f64;
                    Ok(SampleStep {
                        gradient: eval.gradient,
                        reward: group.rewards.iter().sum::<f64>() / n,
                        kl: eval.kl,
                        format: group.breakdowns.iter().map(|b| b.r_format).sum::<f64>() / n,
                        tiou: group.breakdowns.iter().map(|b| b.r_tiou).sum::<f64>() / n,
                        clip_events: eval.clip_events,
                    })
                })
                .collect::<Result<_>>()?;

            let mut total = Weights::zeros(
                snapshot.current.vocab(),
                snapshot.current.context_dim(),
            );
            for s in &per_sample {
                total.axpy(1.0, &s.gradient);
            }
            if cfg.learning_rate != 0.0 {
                snapshot.current.weights.axpy(cfg.learning_rate, &total);
            }
            if !snapshot.current.weights.is_finite() {
                return Err(Error::invalid(format!(
                    "parameters diverged at step {step}; lower the learning rate"
                )));
            }

            let n = per_sample.len() as f64;
            let mean = |f: fn(&SampleStep) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
            log.push(StepLog {
                step,
                mean_reward: mean(|s| s.reward),
                mean_kl: mean(|s| s.kl),
                mean_format: mean(|s| s.format),
                mean_tiou: mean(|s| s.tiou),
                clip_events: per_sample.iter().map(|s| s.clip_events).sum(),
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params: snapshot.current,
        log,
    })
}

/// Supervised GRPO on labelled source data.
pub fn train_source(
    dataset: &[GroundingSample],
    snapshot: PolicySnapshot,
    cfg: &GrpoConfig,
    rewards: &RewardConfig,
) -> Result<TrainOutcome> {
    rewards.validate()?;
    let labels = dataset
        .iter()
        .map(|s| {
            s.gt_interval
                .ok_or_else(|| Error::invalid(format!("source sample {} has no label", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    run_grpo(snapshot, dataset, cfg, |i, r| {
        source_reward(&r.rendered, &labels[i], rewards)
    })
}
