use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::GroundingSample;
use crate::error::{Error, Result};
use crate::interval::tiou;
use crate::policy::{greedy_decode, parse_answer, render, PolicyParams, MAX_RESPONSE_LEN};

/// Recall thresholds reported by [`evaluate`].
pub const RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Grounding metrics over a labelled test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction of samples with tIoU at or above each threshold, keyed
    /// `"0.3"`, `"0.5"`, `"0.7"`.
    pub r_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub n_eval: usize,
    pub format_rate: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn recall(&self, threshold: f64) -> f64 {
        self.r_at.get(&threshold_key(threshold)).copied().unwrap_or(f64::NAN)
    }
}

pub fn threshold_key(threshold: f64) -> String {
    format!("{threshold:.1}")
}

/// Builds a report from per-sample tIoUs (malformed outputs scored 0).
///
/// The scores are sorted before summation so the result does not depend on
/// the order of the test set.
pub fn report_from_scores(scores: &[f64], n_formatted: usize, seed: u64) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let r_at = RECALL_THRESHOLDS
        .iter()
        .map(|&m| {
            let hits = sorted.iter().filter(|&&s| s >= m).count();
            (threshold_key(m), hits as f64 / n)
        })
        .collect();
    Ok(EvalReport {
        r_at,
        miou: sorted.iter().sum::<f64>() / n,
        n_eval: sorted.len(),
        format_rate: n_formatted as f64 / n,
        seed,
    })
}

/// Greedy-decodes every test sample and scores it against the unrelaxed
/// ground truth.
pub fn evaluate(params: &PolicyParams, test: &[GroundingSample], seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    params.validate()?;
    let scored: Vec<(f64, bool)> = test
        .par_iter()
        .map(|s| {
            let gt = s.gt_interval.ok_or_else(|| {
                Error::invalid(format!("test sample {} has no ground truth", s.id))
            })?;
            let tokens = greedy_decode(params, &s.context(), MAX_RESPONSE_LEN);
            Ok(match parse_answer(&render(&tokens)) {
                Some(a) => (tiou(&a.interval, &gt), true),
                None => (0.0, false),
            })
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let formatted = scored.iter().filter(|s| s.1).count();
    report_from_scores(&scores, formatted, seed)
}
