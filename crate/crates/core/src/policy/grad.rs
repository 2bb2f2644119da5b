use super::forward::{log_probs_at, slot, state_kl, window, ContextLogits};
use super::{PolicyParams, Weights};

/// Accumulates gradients expressed as per-state logit sensitivities.
///
/// Contributions to the context weights are summed as logit sensitivities and
/// expanded into the `vocab x context_dim` outer product once, in
/// [`SequenceGrad::finish`]; this requires that every state added shares the
/// same context.
#[derive(Debug, Clone)]
pub struct SequenceGrad {
    weights: Weights,
    ctx_dlogits: [Vec<f64>; 2],
    scratch: Vec<f64>,
    scratch_ref: Vec<f64>,
}

impl SequenceGrad {
    pub fn new(vocab: usize, context_dim: usize) -> Self {
        Self {
            weights: Weights::zeros(vocab, context_dim),
            ctx_dlogits: [vec![0.0; vocab], vec![0.0; vocab]],
            scratch: vec![0.0; vocab],
            scratch_ref: vec![0.0; vocab],
        }
    }

    pub fn for_params(params: &PolicyParams) -> Self {
        Self::new(params.vocab(), params.context_dim())
    }

    /// Adds `scale * dz` where `dz` is the gradient w.r.t. the raw logits of
    /// state `(p1, p2)`.
    fn add_state(&mut self, p1: usize, p2: usize, dz: &[f64], scale: f64) {
        let v = self.weights.vocab;
        let prev = &mut self.weights.prev[p1 * v..(p1 + 1) * v];
        let prev2 = &mut self.weights.prev2[p2 * v..(p2 + 1) * v];
        let ctx = &mut self.ctx_dlogits[slot(p1)];
        for j in 0..v {
            let g = scale * dz[j];
            prev[j] += g;
            prev2[j] += g;
            self.weights.bias[j] += g;
            ctx[j] += g;
        }
    }

    /// Adds `scale * grad log pi(tokens)`.
    pub fn add_logprob(
        &mut self,
        params: &PolicyParams,
        ctx: &ContextLogits,
        tokens: &[usize],
        scale: f64,
    ) {
        if scale == 0.0 {
            return;
        }
        let inv_t = 1.0 / params.temperature;
        let mut dz = std::mem::take(&mut self.scratch);
        for t in 0..tokens.len() {
            log_probs_at(params, ctx, tokens, t, &mut dz);
            // d log p_tok / d z_j = (1[j = tok] - p_j) / T
            for x in dz.iter_mut() {
                *x = -x.exp() * inv_t;
            }
            dz[tokens[t]] += inv_t;
            let (p1, p2) = window(tokens, t);
            self.add_state(p1, p2, &dz, scale);
        }
        self.scratch = dz;
    }

    /// Adds `scale * grad sum_t KL(pi(.|s_t) || ref(.|s_t))` over the states
    /// visited by `tokens`. Returns the KL value.
    pub fn add_kl(
        &mut self,
        params: &PolicyParams,
        ctx: &ContextLogits,
        reference: &PolicyParams,
        ctx_ref: &ContextLogits,
        tokens: &[usize],
        scale: f64,
    ) -> f64 {
        let inv_t = 1.0 / params.temperature;
        let mut lp = std::mem::take(&mut self.scratch);
        let mut lq = std::mem::take(&mut self.scratch_ref);
        let mut total = 0.0;
        for t in 0..tokens.len() {
            log_probs_at(params, ctx, tokens, t, &mut lp);
            log_probs_at(reference, ctx_ref, tokens, t, &mut lq);
            let kl = state_kl(&lp, &lq);
            total += kl;
            if scale != 0.0 {
                // dKL/dz_j = p_j (log p_j - log q_j - KL) / T
                for (a, &b) in lp.iter_mut().zip(lq.iter()) {
                    let p = a.exp();
                    *a = if p > 0.0 { p * (*a - b - kl) * inv_t } else { 0.0 };
                }
                let (p1, p2) = window(tokens, t);
                self.add_state(p1, p2, &lp, scale);
            }
        }
        self.scratch = lp;
        self.scratch_ref = lq;
        total
    }

    /// Expands the context-weight contributions and returns the gradient.
    pub fn finish(mut self, context: &[f64]) -> Weights {
        let cd = self.weights.context_dim;
        let w = &mut self.weights;
        for (block, dlogits) in [&mut w.ctx, &mut w.ctx_after_stamp]
            .into_iter()
            .zip(&self.ctx_dlogits)
        {
            for (row, &g) in block.chunks_exact_mut(cd).zip(dlogits) {
                if g != 0.0 {
                    for (w, &c) in row.iter_mut().zip(context) {
                        *w += g * c;
                    }
                }
            }
        }
        self.weights
    }
}

/// Analytic gradient of `log pi(tokens | context)` w.r.t. all weights.
pub fn grad_logprob(params: &PolicyParams, context: &[f64], tokens: &[usize]) -> Weights {
    let ctx = ContextLogits::new(params, context);
    let mut acc = SequenceGrad::for_params(params);
    acc.add_logprob(params, &ctx, tokens, 1.0);
    acc.finish(context)
}

/// Analytic gradient of [`super::kl_to_ref`] w.r.t. the weights of `params`.
pub fn grad_kl_to_ref(
    params: &PolicyParams,
    reference: &PolicyParams,
    context: &[f64],
    tokens: &[usize],
) -> Weights {
    let ctx = ContextLogits::new(params, context);
    let ctx_ref = ContextLogits::new(reference, context);
    let mut acc = SequenceGrad::for_params(params);
    acc.add_kl(params, &ctx, reference, &ctx_ref, tokens, 1.0);
    acc.finish(context)
}
