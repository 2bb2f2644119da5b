//! GRPO training and uncertainty-aware few-shot target adaptation for
//! temporal grounding, on synthetic source and shifted target domains.

pub mod artifacts;
pub mod envgen;
pub mod error;
pub mod experiment;
pub mod grpo;
pub mod interval;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod theory;
pub mod urpa;

pub use envgen::{DomainSpec, DomainTag, GroundingSample};
pub use error::{Error, Result};
pub use experiment::{EvalReport, ExperimentConfig};
pub use grpo::{GrpoConfig, RolloutGroup, StepLog};
pub use interval::{clamp_interval, relax, tiou, TimeInterval};
pub use policy::{InitConfig, PolicyParams, PolicySnapshot, TokenResponse};
pub use rewards::{RewardBreakdown, RewardConfig};
pub use urpa::{AdaptConfig, PseudoLabel};
