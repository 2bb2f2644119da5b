use rand::Rng;

use super::{render, vocab, PolicyParams, PolicySnapshot, TokenResponse, MAX_RESPONSE_LEN};
use crate::envgen::GroundingSample;

/// Both context projections `U[slot] · context`, shared by every position of
/// every rollout of one sample.
#[derive(Debug, Clone)]
pub struct ContextLogits([Vec<f64>; 2]);

impl ContextLogits {
    pub fn new(params: &PolicyParams, context: &[f64]) -> Self {
        let w = &params.weights;
        assert_eq!(
            context.len(),
            w.context_dim,
            "context length does not match the policy"
        );
        let project = |m: &[f64]| -> Vec<f64> {
            m.chunks_exact(w.context_dim)
                .map(|row| row.iter().zip(context).map(|(a, b)| a * b).sum())
                .collect()
        };
        Self([project(w.ctx_slot(0)), project(w.ctx_slot(1))])
    }
}

/// The two-token window preceding position `t`, EOS-padded.
pub(crate) fn window(tokens: &[usize], t: usize) -> (usize, usize) {
    let p1 = if t >= 1 { tokens[t - 1] } else { vocab::EOS };
    let p2 = if t >= 2 { tokens[t - 2] } else { vocab::EOS };
    (p1, p2)
}

/// Context slot of a state whose previous token is `p1`.
pub(crate) fn slot(p1: usize) -> usize {
    usize::from(vocab::timestamp_bin(p1).is_some())
}

/// Writes tempered logits `z / T` for the state `(p1, p2)` into `out`.
pub(crate) fn tempered_logits(
    params: &PolicyParams,
    ctx: &ContextLogits,
    p1: usize,
    p2: usize,
    out: &mut [f64],
) {
    let w = &params.weights;
    let v = w.vocab;
    let inv_t = 1.0 / params.temperature;
    let prev = &w.prev[p1 * v..(p1 + 1) * v];
    let prev2 = &w.prev2[p2 * v..(p2 + 1) * v];
    let c = &ctx.0[slot(p1)];
    for j in 0..v {
        out[j] = (c[j] + prev[j] + prev2[j] + w.bias[j]) * inv_t;
    }
}

/// In-place log-softmax; returns nothing, `z` holds log-probabilities after.
pub(crate) fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|x| *x -= lse);
}

pub(crate) fn log_probs_at(
    params: &PolicyParams,
    ctx: &ContextLogits,
    tokens: &[usize],
    t: usize,
    out: &mut [f64],
) {
    let (p1, p2) = window(tokens, t);
    tempered_logits(params, ctx, p1, p2, out);
    log_softmax_in_place(out);
}

fn check_tokens(params: &PolicyParams, tokens: &[usize]) {
    let v = params.vocab();
    assert!(
        tokens.iter().all(|&t| t < v),
        "token id out of range for vocabulary of size {v}"
    );
}

/// Next-token distribution after `prefix`.
pub fn position_probs(params: &PolicyParams, context: &[f64], prefix: &[usize]) -> Vec<f64> {
    check_tokens(params, prefix);
    let ctx = ContextLogits::new(params, context);
    let mut z = vec![0.0; params.vocab()];
    log_probs_at(params, &ctx, prefix, prefix.len(), &mut z);
    z.iter_mut().for_each(|x| *x = x.exp());
    z
}

/// Ancestral sampling until EOS or `max_len` tokens.
/// Returns the tokens and their log-probabilities.
pub fn sample_tokens<R: Rng + ?Sized>(
    params: &PolicyParams,
    ctx: &ContextLogits,
    max_len: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<f64>) {
    let v = params.vocab();
    let mut tokens = Vec::with_capacity(max_len);
    let mut logps = Vec::with_capacity(max_len);
    let mut z = vec![0.0; v];
    while tokens.len() < max_len {
        log_probs_at(params, ctx, &tokens, tokens.len(), &mut z);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = None;
        let mut last_positive = 0;
        for (j, &lp) in z.iter().enumerate() {
            let p = lp.exp();
            if p > 0.0 {
                last_positive = j;
            }
            acc += p;
            if u < acc {
                chosen = Some(j);
                break;
            }
        }
        let tok = chosen.unwrap_or(last_positive);
        tokens.push(tok);
        logps.push(z[tok]);
        if tok == vocab::EOS {
            break;
        }
    }
    (tokens, logps)
}

/// One rollout from the behaviour policy `snapshot.old`.
pub fn sample_response<R: Rng + ?Sized>(
    snapshot: &PolicySnapshot,
    sample: &GroundingSample,
    rng: &mut R,
) -> TokenResponse {
    let ctx = ContextLogits::new(&snapshot.old, &sample.context());
    let (tokens, per_token_logprobs) = sample_tokens(&snapshot.old, &ctx, MAX_RESPONSE_LEN, rng);
    TokenResponse {
        rendered: render(&tokens),
        tokens,
        per_token_logprobs,
    }
}

/// Argmax decoding (lowest id wins ties).
pub fn greedy_decode(params: &PolicyParams, context: &[f64], max_len: usize) -> Vec<usize> {
    let ctx = ContextLogits::new(params, context);
    let mut tokens = Vec::with_capacity(max_len);
    let mut z = vec![0.0; params.vocab()];
    while tokens.len() < max_len {
        let (p1, p2) = window(&tokens, tokens.len());
        tempered_logits(params, &ctx, p1, p2, &mut z);
        let mut best = 0;
        for j in 1..z.len() {
            if z[j] > z[best] {
                best = j;
            }
        }
        tokens.push(best);
        if best == vocab::EOS {
            break;
        }
    }
    tokens
}

/// Exact log-probability of `tokens`.
pub fn logprob(params: &PolicyParams, context: &[f64], tokens: &[usize]) -> f64 {
    check_tokens(params, tokens);
    let ctx = ContextLogits::new(params, context);
    let mut z = vec![0.0; params.vocab()];
    (0..tokens.len())
        .map(|t| {
            log_probs_at(params, &ctx, tokens, t, &mut z);
            z[tokens[t]]
        })
        .sum()
}

/// Sum over the visited states of `tokens` of `KL(pi(.|state) || ref(.|state))`.
pub fn kl_to_ref(
    params: &PolicyParams,
    reference: &PolicyParams,
    context: &[f64],
    tokens: &[usize],
) -> f64 {
    assert!(
        params.weights.same_shape(&reference.weights),
        "policy and reference shapes differ"
    );
    check_tokens(params, tokens);
    let ctx = ContextLogits::new(params, context);
    let ctx_ref = ContextLogits::new(reference, context);
    let v = params.vocab();
    let (mut lp, mut lq) = (vec![0.0; v], vec![0.0; v]);
    (0..tokens.len())
        .map(|t| {
            log_probs_at(params, &ctx, tokens, t, &mut lp);
            log_probs_at(reference, &ctx_ref, tokens, t, &mut lq);
            state_kl(&lp, &lq)
        })
        .sum()
}

pub(crate) fn state_kl(lp: &[f64], lq: &[f64]) -> f64 {
    let kl: f64 = lp
        .iter()
        .zip(lq)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p > 0.0 {
                p * (a - b)
            } else {
                0.0
            }
        })
        .sum();
    kl.max(0.0)
}
