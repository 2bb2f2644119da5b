//! Shared inputs for the hot-path benchmarks.

use urpa_core::envgen::generate_domain;
use urpa_core::grpo::{rollout_group, RolloutGroup};
use urpa_core::rewards::source_reward;
use urpa_core::{DomainSpec, GroundingSample, InitConfig, PolicyParams, PolicySnapshot, RewardConfig};

/// A freshly initialized policy and a handful of labelled source samples,
/// with one rollout group already drawn for the first sample.
pub struct Fixture {
    pub samples: Vec<GroundingSample>,
    pub snapshot: PolicySnapshot,
    pub group: RolloutGroup,
    pub reward: RewardConfig,
}

impl Fixture {
    pub fn new(n_samples: usize, group_size: usize) -> Self {
        let spec = DomainSpec::default();
        let (samples, _) = generate_domain(&spec, n_samples, 7, true).expect("valid default domain");
        let params = PolicyParams::initialize(spec.context_dim(), &InitConfig::default(), 7)
            .expect("valid default init");
        let snapshot = PolicySnapshot::anchored_at(params);
        let reward = RewardConfig::default();
        let gt = samples[0].gt_interval.expect("source samples are labelled");
        let group = rollout_group(&snapshot, &samples[0], group_size, 1e-8, (7, 0), |r| {
            source_reward(&r.rendered, &gt, &reward)
        })
        .expect("rollouts score cleanly");
        Fixture {
            samples,
            snapshot,
            group,
            reward,
        }
    }

    pub fn context(&self) -> Vec<f64> {
        self.samples[0].context()
    }
}
