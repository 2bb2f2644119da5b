//! Autoregressive linear-softmax policy over a structured token vocabulary.
//!
//! At every position the next-token logits are
//!
//! ```text
//! z = U[slot] · context + V[prev] + W[prev2] + b,     p = softmax(z / temperature)
//! ```
//!
//! where `prev` and `prev2` are the previous two tokens (EOS stands in for the
//! positions before the sequence starts) and `slot` is 1 when `prev` is a
//! timestamp, else 0. The second context projection lets the closing
//! timestamp read the context differently from the opening one.
//! Log-probabilities, per-state KL divergences and their gradients are all
//! exact.

mod checkpoint;
mod forward;
mod grad;
mod render;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use forward::{
    greedy_decode, kl_to_ref, logprob, position_probs, sample_response, sample_tokens,
    ContextLogits,
};
pub use grad::{grad_kl_to_ref, grad_logprob, SequenceGrad};
pub use render::{format_regex, parse_answer, render, ParsedAnswer};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Longest response the policy may emit, EOS included.
pub const MAX_RESPONSE_LEN: usize = 24;

/// Token layout: 5 structural tokens, 8 fillers, 101 timestamps.
pub mod vocab {
    pub const THINK_OPEN: usize = 0;
    pub const THINK_CLOSE: usize = 1;
    pub const ANSWER_OPEN: usize = 2;
    pub const ANSWER_CLOSE: usize = 3;
    pub const EOS: usize = 4;
    pub const FILLER_BASE: usize = 5;
    pub const N_FILLERS: usize = 8;
    pub const TIMESTAMP_BASE: usize = FILLER_BASE + N_FILLERS;
    pub const N_TIMESTAMPS: usize = 101;
    pub const SIZE: usize = TIMESTAMP_BASE + N_TIMESTAMPS;

    /// Id of timestamp token `T{k:03}` (value `k / 100`).
    pub fn timestamp(k: usize) -> usize {
        assert!(k < N_TIMESTAMPS, "timestamp bin {k} out of range");
        TIMESTAMP_BASE + k
    }

    pub fn filler(i: usize) -> usize {
        assert!(i < N_FILLERS, "filler {i} out of range");
        FILLER_BASE + i
    }

    /// Bin index of a timestamp token.
    pub fn timestamp_bin(id: usize) -> Option<usize> {
        (TIMESTAMP_BASE..SIZE).contains(&id).then(|| id - TIMESTAMP_BASE)
    }

    pub fn is_filler(id: usize) -> bool {
        (FILLER_BASE..TIMESTAMP_BASE).contains(&id)
    }
}

/// The trainable tensors of a policy (also used as a gradient container).
///
/// `ctx` and `ctx_after_stamp` are `vocab x context_dim`, row-major; the
/// second applies at positions that directly follow a timestamp token.
/// `prev` and `prev2` are stored previous-token-major: entry
/// `[p * vocab + j]` is the logit contribution to token `j` when the
/// previous (resp. second previous) token is `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub vocab: usize,
    pub context_dim: usize,
    pub ctx: Vec<f64>,
    pub ctx_after_stamp: Vec<f64>,
    pub prev: Vec<f64>,
    pub prev2: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Weights {
    pub fn zeros(vocab: usize, context_dim: usize) -> Self {
        Self {
            vocab,
            context_dim,
            ctx: vec![0.0; vocab * context_dim],
            ctx_after_stamp: vec![0.0; vocab * context_dim],
            prev: vec![0.0; vocab * vocab],
            prev2: vec![0.0; vocab * vocab],
            bias: vec![0.0; vocab],
        }
    }

    pub fn same_shape(&self, other: &Weights) -> bool {
        self.vocab == other.vocab && self.context_dim == other.context_dim
    }

    fn blocks(&self) -> [&[f64]; 5] {
        [&self.ctx, &self.ctx_after_stamp, &self.prev, &self.prev2, &self.bias]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.ctx,
            &mut self.ctx_after_stamp,
            &mut self.prev,
            &mut self.prev2,
            &mut self.bias,
        ]
    }

    /// Context projection of slot 0 (default) or 1 (after a timestamp).
    pub fn ctx_slot(&self, slot: usize) -> &[f64] {
        match slot {
            0 => &self.ctx,
            _ => &self.ctx_after_stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access across all blocks.
    pub fn get(&self, mut i: usize) -> f64 {
        for b in self.blocks() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for b in self.blocks_mut() {
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Weights) {
        debug_assert!(self.same_shape(other));
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    pub fn scale(&mut self, a: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= a);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.blocks().iter().flat_map(|b| b.iter()).map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist_sq(&self, other: &Weights) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().flat_map(|b| b.iter()).all(|x| x.is_finite())
    }
}

/// Parameters of the policy. Temperature is a fixed hyperparameter, not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: Weights,
    pub temperature: f64,
}

/// How a fresh policy is initialized.
///
/// The format prior plays the part of a pretrained model that roughly knows
/// the response grammar but nothing about localization: every grammatical
/// first-order transition gets a logit of `format_prior`, and after a
/// timestamp, closing the answer is as likely as emitting another timestamp.
/// The policy must learn to count timestamps (through `prev2`) and to place
/// them (through `ctx`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub format_prior: f64,
    /// Std of the Gaussian initialization of the context weights.
    pub init_scale: f64,
    pub temperature: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            format_prior: 8.0,
            init_scale: 0.01,
            temperature: 1.0,
        }
    }
}

impl PolicyParams {
    pub fn zeros(vocab: usize, context_dim: usize, temperature: f64) -> Result<Self> {
        let p = Self {
            weights: Weights::zeros(vocab, context_dim),
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    /// A fresh policy over the structured vocabulary.
    pub fn initialize(context_dim: usize, init: &InitConfig, seed: u64) -> Result<Self> {
        use vocab::*;
        let mut p = Self::zeros(SIZE, context_dim, init.temperature)?;
        if init.init_scale > 0.0 {
            let normal = Normal::new(0.0, init.init_scale)
                .map_err(|e| Error::invalid(format!("init_scale: {e}")))?;
            let mut rng = rng::stream(seed, &[tag::INIT]);
            let w = &mut p.weights;
            w.ctx
                .iter_mut()
                .chain(w.ctx_after_stamp.iter_mut())
                .for_each(|w| *w = normal.sample(&mut rng));
        }
        let g = init.format_prior;
        let w = &mut p.weights;
        let mut allow = |from: usize, to: usize, logit: f64| w.prev[from * SIZE + to] = logit;
        allow(EOS, THINK_OPEN, g);
        for f in 0..N_FILLERS {
            allow(THINK_OPEN, filler(f), g);
            for f2 in 0..N_FILLERS {
                allow(filler(f), filler(f2), g - 1.0);
            }
            allow(filler(f), THINK_CLOSE, g + 1.0);
        }
        allow(THINK_OPEN, THINK_CLOSE, g);
        allow(THINK_CLOSE, ANSWER_OPEN, g);
        let close_after_stamp = g + (N_TIMESTAMPS as f64).ln();
        for k in 0..N_TIMESTAMPS {
            allow(ANSWER_OPEN, timestamp(k), g);
            for k2 in 0..N_TIMESTAMPS {
                allow(timestamp(k), timestamp(k2), g);
            }
            allow(timestamp(k), ANSWER_CLOSE, close_after_stamp);
        }
        allow(ANSWER_CLOSE, EOS, g);
        p.validate()?;
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.weights.vocab
    }

    pub fn context_dim(&self) -> usize {
        self.weights.context_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        if self.weights.vocab <= vocab::EOS {
            return Err(Error::invalid("vocabulary must contain the EOS token"));
        }
        if !self.weights.is_finite() {
            return Err(Error::invalid("policy parameters must be finite"));
        }
        Ok(())
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            temperature,
        }
    }
}

/// The current policy, the behaviour policy of the last refresh, and the
/// frozen KL anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub current: PolicyParams,
    pub old: PolicyParams,
    pub reference: PolicyParams,
}

impl PolicySnapshot {
    /// All three roles start from `params`.
    pub fn anchored_at(params: PolicyParams) -> Self {
        Self {
            current: params.clone(),
            old: params.clone(),
            reference: params,
        }
    }

    pub fn refresh_old(&mut self) {
        self.old = self.current.clone();
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.current, &self.old, &self.reference] {
            p.validate()?;
        }
        if !self.current.weights.same_shape(&self.old.weights)
            || !self.current.weights.same_shape(&self.reference.weights)
        {
            return Err(Error::invalid("snapshot parameter shapes differ"));
        }
        Ok(())
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenResponse {
    pub tokens: Vec<usize>,
    pub per_token_logprobs: Vec<f64>,
    pub rendered: String,
}

impl TokenResponse {
    pub fn logprob(&self) -> f64 {
        self.per_token_logprobs.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_layout() {
        assert_eq!(vocab::SIZE, 114);
        assert_eq!(vocab::timestamp(0), 13);
        assert_eq!(vocab::timestamp(100), 113);
        assert_eq!(vocab::timestamp_bin(113), Some(100));
        assert_eq!(vocab::timestamp_bin(12), None);
        assert!(vocab::is_filler(12) && !vocab::is_filler(13));
    }

    #[test]
    fn flat_access_covers_all_blocks() {
        let mut w = Weights::zeros(6, 3);
        assert_eq!(w.len(), 2 * 6 * 3 + 36 + 36 + 6);
        for i in 0..w.len() {
            w.set(i, i as f64);
        }
        assert_eq!(w.get(0), 0.0);
        assert_eq!(w.bias[5], (w.len() - 1) as f64);
        assert_eq!(w.ctx_after_stamp[0], 18.0);
        assert_eq!(w.prev[0], 36.0);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(PolicyParams::zeros(114, 4, 0.0).is_err());
        assert!(PolicyParams::zeros(114, 4, f64::NAN).is_err());
        let mut p = PolicyParams::zeros(114, 4, 1.0).unwrap();
        p.weights.bias[0] = f64::INFINITY;
        assert!(p.validate().is_err());
    }

    #[test]
    fn snapshot_shapes_checked() {
        let mut s = PolicySnapshot::anchored_at(PolicyParams::zeros(114, 4, 1.0).unwrap());
        assert!(s.validate().is_ok());
        s.reference = PolicyParams::zeros(114, 5, 1.0).unwrap();
        assert!(s.validate().is_err());
    }
}
