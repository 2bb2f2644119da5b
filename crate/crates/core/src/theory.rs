//! Numerical checks of the rollout-std consistency argument.
//!
//! The argument has three steps: the empirical std of `G` i.i.d. rollouts
//! converges to the policy std; Pinsker bounds the total variation between
//! the policy and an ideal predictive distribution by `sqrt(KL / 2)`; and with
//! second moments bounded by `M` the variance gap is at most `4 M sqrt(KL)`.
//! Each step is checked here on distributions whose moments and divergences
//! are known, plus a stabilization probe on a trained policy.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalSampler};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::artifacts::{to_jsonl, write_atomic};
use crate::envgen::GroundingSample;
use crate::error::{Error, Result};
use crate::policy::{parse_answer, sample_response, PolicySnapshot};
use crate::rng::{self, tag};

/// Absolute tolerance of every numerical integral.
pub const INTEGRATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticDistribution {
    Gaussian { mean: f64, std: f64 },
    /// Finite support `values` with matching `probs`.
    Categorical { values: Vec<f64>, probs: Vec<f64> },
    /// `N(mu, sigma)` conditioned on `[lo, hi]`.
    TruncatedGaussian { mu: f64, sigma: f64, lo: f64, hi: f64 },
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

impl AnalyticDistribution {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        let d = Self::Gaussian { mean, std };
        d.validate()?;
        Ok(d)
    }

    pub fn categorical(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let d = Self::Categorical { values, probs };
        d.validate()?;
        Ok(d)
    }

    pub fn truncated(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self> {
        let d = Self::TruncatedGaussian { mu, sigma, lo, hi };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Gaussian { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std > 0.0) {
                    return Err(Error::invalid("gaussian needs a finite mean and positive std"));
                }
            }
            Self::Categorical { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::invalid("categorical needs matching non-empty values and probs"));
                }
                if values.iter().any(|v| !v.is_finite()) || probs.iter().any(|p| p.is_nan() || *p < 0.0) {
                    return Err(Error::invalid("categorical values must be finite and probs >= 0"));
                }
                if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("categorical probs must sum to 1"));
                }
            }
            Self::TruncatedGaussian { mu, sigma, lo, hi } => {
                if !(mu.is_finite() && sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::invalid("truncated gaussian needs a finite mu and positive sigma"));
                }
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::invalid("truncated gaussian needs lo < hi"));
                }
                let (a, b) = ((lo - mu) / sigma, (hi - mu) / sigma);
                if std_normal().cdf(b) - std_normal().cdf(a) < 1e-12 {
                    return Err(Error::invalid("truncation window has negligible mass"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Gaussian { mean, .. } => *mean,
            Self::Categorical { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
            Self::TruncatedGaussian { mu, sigma, .. } => {
                let (pa, pb, z, _, _) = self.truncation_terms();
                mu + sigma * (pa - pb) / z
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Gaussian { std, .. } => std * std,
            Self::Categorical { values, probs } => {
                let m = self.mean();
                values.iter().zip(probs).map(|(v, p)| p * (v - m).powi(2)).sum()
            }
            Self::TruncatedGaussian { sigma, .. } => {
                let (pa, pb, z, a, b) = self.truncation_terms();
                let (a_term, b_term) = (finite_or_zero(a * pa), finite_or_zero(b * pb));
                sigma * sigma * (1.0 + (a_term - b_term) / z - ((pa - pb) / z).powi(2))
            }
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().max(0.0).sqrt()
    }

    pub fn second_moment(&self) -> f64 {
        self.variance() + self.mean().powi(2)
    }

    /// `(phi(a), phi(b), Z, a, b)` in standardized truncation coordinates.
    fn truncation_terms(&self) -> (f64, f64, f64, f64, f64) {
        let Self::TruncatedGaussian { mu, sigma, lo, hi } = self else {
            unreachable!("truncation terms of a non-truncated distribution")
        };
        let n = std_normal();
        let (a, b) = ((lo - mu) / sigma, (hi - mu) / sigma);
        (n.pdf(a), n.pdf(b), n.cdf(b) - n.cdf(a), a, b)
    }

    /// Density of a continuous distribution (zero outside the support).
    fn pdf(&self, x: f64) -> f64 {
        match self {
            Self::Gaussian { mean, std } => std_normal().pdf((x - mean) / std) / std,
            Self::TruncatedGaussian { mu, sigma, lo, hi } => {
                if x < *lo || x > *hi {
                    return 0.0;
                }
                let (_, _, z, _, _) = self.truncation_terms();
                std_normal().pdf((x - mu) / sigma) / (sigma * z)
            }
            Self::Categorical { .. } => unreachable!("categorical has no density"),
        }
    }

    /// Interval outside which a continuous density is negligible.
    fn effective_support(&self) -> (f64, f64) {
        match self {
            Self::Gaussian { mean, std } => (mean - 40.0 * std, mean + 40.0 * std),
            Self::TruncatedGaussian { lo, hi, .. } => (*lo, *hi),
            Self::Categorical { .. } => unreachable!("categorical has no density"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian { mean, std } => NormalSampler::new(*mean, *std)
                .expect("validated gaussian")
                .sample(rng),
            Self::Categorical { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("non-empty support")
            }
            Self::TruncatedGaussian { mu, sigma, lo, hi } => {
                let n = std_normal();
                let (ca, cb) = (n.cdf((lo - mu) / sigma), n.cdf((hi - mu) / sigma));
                let u: f64 = rng.random();
                (mu + sigma * n.inverse_cdf(ca + u * (cb - ca))).clamp(*lo, *hi)
            }
        }
    }
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
/// The range is first cut into 64 panels so narrow features are not skipped.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    (0..PANELS)
        .map(|i| {
            let (l, r) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let m = 0.5 * (l + r);
            let (fl, fm, fr) = (f(l), f(m), f(r));
            let whole = (r - l) / 6.0 * (fl + 4.0 * fm + fr);
            simpson_step(&f, l, r, fl, fm, fr, whole, tol / PANELS as f64, 50)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn same_family(p: &AnalyticDistribution, q: &AnalyticDistribution) -> Result<()> {
    use AnalyticDistribution::*;
    match (p, q) {
        (Gaussian { .. }, Gaussian { .. })
        | (Categorical { .. }, Categorical { .. })
        | (TruncatedGaussian { .. }, TruncatedGaussian { .. }) => Ok(()),
        _ => Err(Error::invalid("divergences need two distributions of the same kind")),
    }
}

/// `KL(p || q)`: closed form for Gaussians and categoricals, numerical for
/// truncated Gaussians.
pub fn kl_divergence(p: &AnalyticDistribution, q: &AnalyticDistribution) -> Result<f64> {
    use AnalyticDistribution::*;
    p.validate()?;
    q.validate()?;
    same_family(p, q)?;
    match (p, q) {
        (Gaussian { mean: m1, std: s1 }, Gaussian { mean: m2, std: s2 }) => {
            Ok((s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5)
        }
        (Categorical { values: v1, probs: p1 }, Categorical { values: v2, probs: p2 }) => {
            let mut kl = 0.0;
            for (v, &pp) in v1.iter().zip(p1) {
                if pp == 0.0 {
                    continue;
                }
                let qq: f64 = v2.iter().zip(p2).filter(|(w, _)| *w == v).map(|(_, q)| q).sum();
                if qq == 0.0 {
                    return Err(Error::InfiniteKl);
                }
                kl += pp * (pp / qq).ln();
            }
            Ok(kl.max(0.0))
        }
        (
            TruncatedGaussian { lo: l1, hi: h1, .. },
            TruncatedGaussian { lo: l2, hi: h2, .. },
        ) => {
            if l1 < l2 || h1 > h2 {
                return Err(Error::InfiniteKl);
            }
            let kl = integrate(
                |x| {
                    let (a, b) = (p.pdf(x), q.pdf(x));
                    if a == 0.0 {
                        0.0
                    } else {
                        a * (a / b).ln()
                    }
                },
                *l1,
                *h1,
                INTEGRATION_TOL,
            );
            Ok(kl.max(0.0))
        }
        _ => unreachable!("family checked above"),
    }
}

/// Total variation distance `sup_A |P(A) - Q(A)|`.
pub fn total_variation(p: &AnalyticDistribution, q: &AnalyticDistribution) -> Result<f64> {
    use AnalyticDistribution::*;
    p.validate()?;
    q.validate()?;
    same_family(p, q)?;
    if let (Categorical { values: v1, probs: p1 }, Categorical { values: v2, probs: p2 }) = (p, q) {
        let mass = |vals: &[f64], probs: &[f64], x: f64| -> f64 {
            vals.iter().zip(probs).filter(|(v, _)| **v == x).map(|(_, p)| p).sum()
        };
        let mut support: Vec<f64> = v1.iter().chain(v2).copied().collect();
        support.sort_by(f64::total_cmp);
        support.dedup();
        return Ok(0.5
            * support
                .iter()
                .map(|&x| (mass(v1, p1, x) - mass(v2, p2, x)).abs())
                .sum::<f64>());
    }
    let (a1, b1) = p.effective_support();
    let (a2, b2) = q.effective_support();
    let tv = 0.5 * integrate(|x| (p.pdf(x) - q.pdf(x)).abs(), a1.min(a2), b1.max(b2), INTEGRATION_TOL);
    Ok(tv.clamp(0.0, 1.0))
}

/// `sigma_hat_G` with the `1/G` convention. Draw `i` comes from its own
/// stream `(seed, THEORY, i)`, and the draws are sorted before summation, so
/// the result does not depend on how the draws are partitioned or ordered.
pub fn empirical_std(dist: &AnalyticDistribution, g: usize, seed: u64) -> Result<f64> {
    if g < 2 {
        return Err(Error::invalid("empirical std needs G >= 2"));
    }
    dist.validate()?;
    let mut draws: Vec<f64> = (0..g as u64)
        .into_par_iter()
        .map(|i| dist.sample(&mut rng::stream(seed, &[tag::THEORY, i])))
        .collect();
    Ok(population_std(&mut draws))
}

/// Population std of `xs` (sorted in place for an order-free sum).
pub fn population_std(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    // shifting by the smallest draw keeps a constant sample at exactly zero
    let shift = xs[0];
    let mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    let mut dev: Vec<f64> = xs.iter().map(|x| (x - shift - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (dev.iter().sum::<f64>() / n).sqrt()
}

/// Median `|sigma_hat_G - sigma|` for each `G` over `reps` repetitions, and the
/// least-squares slope of `log(median error)` against `log(G)`.
pub fn convergence_exponent(
    dist: &AnalyticDistribution,
    g_list: &[usize],
    reps: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if g_list.len() < 2 || reps == 0 {
        return Err(Error::invalid("need at least two rollout counts and one repetition"));
    }
    let sigma = dist.std();
    let medians = g_list
        .iter()
        .map(|&g| {
            let mut errs = (0..reps as u64)
                .map(|r| {
                    let rep_seed = rng::stream(seed, &[tag::THEORY, g as u64, r]).random::<u64>();
                    Ok((empirical_std(dist, g, rep_seed)? - sigma).abs())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(median(&mut errs))
        })
        .collect::<Result<Vec<f64>>>()?;
    let xs: Vec<f64> = g_list.iter().map(|&g| (g as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    Ok((medians, ols_slope(&xs, &ys)))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinskerCheck {
    pub tv: f64,
    pub kl: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `TV(p, q) <= sqrt(KL(p || q) / 2)`. Infinite KL is reported as an error.
pub fn check_pinsker(p: &AnalyticDistribution, q: &AnalyticDistribution) -> Result<PinskerCheck> {
    let kl = kl_divergence(p, q)?;
    let tv = total_variation(p, q)?;
    let bound = (kl / 2.0).sqrt();
    Ok(PinskerCheck {
        tv,
        kl,
        bound,
        // slack covers the quadrature tolerance
        holds: tv <= bound + 2.0 * INTEGRATION_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceGapCheck {
    pub epsilon: f64,
    /// `|var_p - var_q|`
    pub gap: f64,
    /// `4 M sqrt(epsilon)`
    pub bound: f64,
    /// `|std_p - std_q|`
    pub std_gap: f64,
    /// `sqrt(4 M sqrt(epsilon))`
    pub std_bound: f64,
    pub holds: bool,
}

/// Checks both the variance gap and the derived std gap for `epsilon = KL(p || q)`.
/// Rejects inputs whose second moment exceeds `m`.
pub fn check_variance_gap(
    p: &AnalyticDistribution,
    q: &AnalyticDistribution,
    m: f64,
) -> Result<VarianceGapCheck> {
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::invalid("moment bound M must be positive"));
    }
    for d in [p, q] {
        if d.second_moment() > m {
            return Err(Error::invalid(format!(
                "second moment {} exceeds the bound M = {m}",
                d.second_moment()
            )));
        }
    }
    let epsilon = kl_divergence(p, q)?;
    let gap = (p.variance() - q.variance()).abs();
    let bound = 4.0 * m * epsilon.sqrt();
    let std_gap = (p.std() - q.std()).abs();
    let std_bound = bound.sqrt();
    let slack = 1e-9;
    Ok(VarianceGapCheck {
        epsilon,
        gap,
        bound,
        std_gap,
        std_bound,
        holds: gap <= bound + slack && std_gap <= std_bound + slack,
    })
}

/// One measurement of the rollout-std estimator. Quantities that cannot be
/// observed for a learned policy are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremProbe {
    pub sample_id: Option<String>,
    pub g: usize,
    pub epsilon: Option<f64>,
    pub m: f64,
    /// Empirical std of the (parsed start) draws.
    pub sigma_hat: f64,
    /// Empirical std of parsed ends, for policy probes.
    pub sigma_hat_end: Option<f64>,
    pub sigma_pi: Option<f64>,
    pub sigma_star: Option<f64>,
    pub n_valid: usize,
}

/// Rollout std of parsed starts and ends per sample and per `G`.
///
/// The rollouts for `(sample, G)` come from the stream
/// `(seed, PROBE, hash(id), G)`. Samples with fewer than two parseable
/// rollouts at some `G` get no probe for that `G`.
pub fn probe_trained_policy(
    snapshot: &PolicySnapshot,
    samples: &[GroundingSample],
    g_list: &[usize],
    seed: u64,
) -> Result<Vec<TheoremProbe>> {
    if g_list.iter().any(|&g| g < 2) {
        return Err(Error::invalid("every G must be >= 2"));
    }
    snapshot.validate()?;
    let probes: Vec<Vec<TheoremProbe>> = samples
        .par_iter()
        .map(|s| {
            g_list
                .iter()
                .filter_map(|&g| {
                    let mut r = rng::stream(seed, &[tag::PROBE, rng::hash_str(&s.id), g as u64]);
                    let (mut starts, mut ends): (Vec<f64>, Vec<f64>) = (0..g)
                        .filter_map(|_| parse_answer(&sample_response(snapshot, s, &mut r).rendered))
                        .map(|a| (a.interval.start(), a.interval.end()))
                        .unzip();
                    (starts.len() >= 2).then(|| TheoremProbe {
                        sample_id: Some(s.id.clone()),
                        g,
                        epsilon: None,
                        m: 1.0,
                        n_valid: starts.len(),
                        sigma_hat: population_std(&mut starts),
                        sigma_hat_end: Some(population_std(&mut ends)),
                        sigma_pi: None,
                        sigma_star: None,
                    })
                })
                .collect()
        })
        .collect();
    Ok(probes.into_iter().flatten().collect())
}

/// Median over samples of `|sigma_hat_{G_{k+1}} - sigma_hat_{G_k}|` for each
/// consecutive pair in `g_list`, using samples probed at both sizes.
pub fn stabilization(probes: &[TheoremProbe], g_list: &[usize]) -> Vec<f64> {
    g_list
        .windows(2)
        .map(|w| {
            let mut diffs: Vec<f64> = probes
                .iter()
                .filter(|p| p.g == w[0])
                .filter_map(|lo| {
                    probes
                        .iter()
                        .find(|hi| hi.g == w[1] && hi.sample_id == lo.sample_id)
                        .map(|hi| (hi.sigma_hat - lo.sigma_hat).abs())
                })
                .collect();
            if diffs.is_empty() {
                f64::NAN
            } else {
                median(&mut diffs)
            }
        })
        .collect()
}

/// Outcome of the analytic theorem suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub gaussian_sigma_hat: f64,
    pub gaussian_rel_error: f64,
    pub convergence_medians: Vec<f64>,
    pub convergence_exponent: f64,
    pub pinsker_pairs: usize,
    pub pinsker_violations: usize,
    pub variance_gap_pairs: usize,
    pub variance_gap_violations: usize,
    pub probes: Vec<TheoremProbe>,
    pub passed: bool,
}

/// Settings of [`run_theorem_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSuiteConfig {
    pub seed: u64,
    pub consistency_g: usize,
    pub convergence_g: Vec<usize>,
    pub convergence_reps: usize,
    pub pinsker_pairs: usize,
    pub variance_gap_pairs: usize,
}

impl Default for TheoremSuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            consistency_g: 10_000,
            convergence_g: vec![8, 64, 512, 4096],
            convergence_reps: 100,
            pinsker_pairs: 100,
            variance_gap_pairs: 200,
        }
    }
}

/// Random Gaussian pair for the Pinsker sweep.
pub fn random_gaussian_pair(seed: u64, i: u64) -> (AnalyticDistribution, AnalyticDistribution) {
    let mut r = rng::stream(seed, &[tag::THEORY, 0x9A15, i]);
    let mut g = || {
        AnalyticDistribution::gaussian(r.random_range(-1.0..1.0), r.random_range(0.2..2.0))
            .expect("valid gaussian")
    };
    (g(), g())
}

/// Random pair of truncated Gaussians on `[0, 1]`.
pub fn random_truncated_pair(seed: u64, i: u64) -> (AnalyticDistribution, AnalyticDistribution) {
    let mut r = rng::stream(seed, &[tag::THEORY, 0x7C0D, i]);
    let mut g = || {
        AnalyticDistribution::truncated(r.random_range(0.0..1.0), r.random_range(0.05..0.5), 0.0, 1.0)
            .expect("valid truncated gaussian")
    };
    (g(), g())
}

/// Consistency, convergence rate, Pinsker and variance-gap checks.
///
/// Passing requires: `sigma_hat` of `N(0.5, 0.05)` within 2% at
/// `consistency_g` draws, a convergence exponent in `[-0.6, -0.4]`, and no
/// bound violations.
pub fn run_theorem_suite(cfg: &TheoremSuiteConfig) -> Result<TheoremReport> {
    let sigma = 0.05;
    let gaussian = AnalyticDistribution::gaussian(0.5, sigma)?;
    let sigma_hat = empirical_std(&gaussian, cfg.consistency_g, cfg.seed)?;
    let rel = (sigma_hat - sigma).abs() / sigma;
    let (medians, exponent) =
        convergence_exponent(&gaussian, &cfg.convergence_g, cfg.convergence_reps, cfg.seed)?;

    let pinsker: Vec<PinskerCheck> = (0..cfg.pinsker_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let (p, q) = random_gaussian_pair(cfg.seed, i);
            check_pinsker(&p, &q)
        })
        .collect::<Result<_>>()?;
    let gaps: Vec<(VarianceGapCheck, AnalyticDistribution, AnalyticDistribution)> = (0
        ..cfg.variance_gap_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let (p, q) = random_truncated_pair(cfg.seed, i);
            Ok((check_variance_gap(&p, &q, 1.0)?, p, q))
        })
        .collect::<Result<_>>()?;

    let probes = gaps
        .iter()
        .enumerate()
        .map(|(i, (check, p, q))| {
            Ok(TheoremProbe {
                sample_id: None,
                g: cfg.consistency_g,
                epsilon: Some(check.epsilon),
                m: 1.0,
                sigma_hat: empirical_std(p, cfg.consistency_g, cfg.seed ^ i as u64)?,
                sigma_hat_end: None,
                sigma_pi: Some(p.std()),
                sigma_star: Some(q.std()),
                n_valid: cfg.consistency_g,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pinsker_violations = pinsker.iter().filter(|c| !c.holds).count();
    let variance_gap_violations = gaps.iter().filter(|(c, _, _)| !c.holds).count();
    let passed = rel < 0.02
        && (exponent + 0.5).abs() <= 0.1
        && pinsker_violations == 0
        && variance_gap_violations == 0;
    Ok(TheoremReport {
        gaussian_sigma_hat: sigma_hat,
        gaussian_rel_error: rel,
        convergence_medians: medians,
        convergence_exponent: exponent,
        pinsker_pairs: pinsker.len(),
        pinsker_violations,
        variance_gap_pairs: gaps.len(),
        variance_gap_violations,
        probes,
        passed,
    })
}

/// One JSON record per probe.
pub fn write_probes(path: &Path, probes: &[TheoremProbe]) -> Result<()> {
    write_atomic(path, to_jsonl(probes)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{vocab, PolicyParams};

    fn tg(mu: f64, sigma: f64) -> AnalyticDistribution {
        AnalyticDistribution::truncated(mu, sigma, 0.0, 1.0).unwrap()
    }

    #[test]
    fn simpson_integrates_polynomials_and_gaussians() {
        assert!((integrate(|x| x * x, 0.0, 1.0, 1e-10) - 1.0 / 3.0).abs() < 1e-12);
        let n = AnalyticDistribution::gaussian(0.3, 0.01).unwrap();
        assert!((integrate(|x| n.pdf(x), -1.0, 1.0, 1e-9) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn truncated_moments_match_quadrature() {
        for (mu, sigma) in [(0.4, 0.1), (0.0, 0.3), (0.9, 0.5), (1.3, 0.2)] {
            let d = tg(mu, sigma);
            let mass = integrate(|x| d.pdf(x), 0.0, 1.0, 1e-10);
            let m1 = integrate(|x| x * d.pdf(x), 0.0, 1.0, 1e-10);
            let m2 = integrate(|x| x * x * d.pdf(x), 0.0, 1.0, 1e-10);
            assert!((mass - 1.0).abs() < 1e-8);
            assert!((d.mean() - m1).abs() < 1e-8);
            assert!((d.second_moment() - m2).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_kl_matches_closed_form() {
        // same support: KL = ln(sigma_q Z_q / (sigma_p Z_p))
        //   + E_p[(x - mu_q)^2] / (2 sigma_q^2) - E_p[(x - mu_p)^2] / (2 sigma_p^2)
        for i in 0..20 {
            let (p, q) = random_truncated_pair(11, i);
            let (
                AnalyticDistribution::TruncatedGaussian { mu: mp, sigma: sp, .. },
                AnalyticDistribution::TruncatedGaussian { mu: mq, sigma: sq, .. },
            ) = (&p, &q)
            else {
                unreachable!()
            };
            let z = |d: &AnalyticDistribution| d.truncation_terms().2;
            let e2 = |m: f64| p.variance() + (p.mean() - m).powi(2);
            let closed = (sq * z(&q) / (sp * z(&p))).ln() + e2(*mq) / (2.0 * sq * sq) - e2(*mp) / (2.0 * sp * sp);
            let numeric = kl_divergence(&p, &q).unwrap();
            assert!((closed - numeric).abs() < 1e-5, "{closed} vs {numeric}");
        }
    }

    #[test]
    fn point_mass_has_zero_std() {
        let d = AnalyticDistribution::categorical(vec![0.3], vec![1.0]).unwrap();
        assert_eq!(empirical_std(&d, 50, 1).unwrap(), 0.0);
        assert!(empirical_std(&d, 1, 1).is_err());
    }

    #[test]
    fn gaussian_consistency() {
        let d = AnalyticDistribution::gaussian(0.0, 0.05).unwrap();
        let s = empirical_std(&d, 10_000, 3).unwrap();
        assert!((s - 0.05).abs() / 0.05 < 0.02);
    }

    #[test]
    fn empirical_std_ignores_order_and_partitioning() {
        let d = tg(0.4, 0.2);
        let a = empirical_std(&d, 999, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| empirical_std(&d, 999, 5).unwrap());
        assert_eq!(a.to_bits(), b.to_bits());
        let mut draws: Vec<f64> = (0..999).map(|i| d.sample(&mut rng::stream(5, &[tag::THEORY, i]))).collect();
        draws.reverse();
        assert_eq!(population_std(&mut draws).to_bits(), a.to_bits());
    }

    #[test]
    fn pinsker_examples() {
        let n = AnalyticDistribution::gaussian(0.0, 1.0).unwrap();
        let c = check_pinsker(&n, &n).unwrap();
        assert!(c.tv < 1e-6 && c.bound == 0.0 && c.holds);

        let m = AnalyticDistribution::gaussian(0.1, 1.0).unwrap();
        let c = check_pinsker(&n, &m).unwrap();
        assert!((c.kl - 0.005).abs() < 1e-12);
        assert!((c.bound - 0.05).abs() < 1e-12);
        // equal-variance closed form 2 Phi(0.05) - 1
        let exact = 2.0 * std_normal().cdf(0.05) - 1.0;
        assert!((c.tv - exact).abs() < 1e-6);
        assert!((c.tv - 0.0399).abs() < 1e-4);
        assert!(c.holds);
    }

    #[test]
    fn categorical_divergences() {
        let p = AnalyticDistribution::categorical(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let q = AnalyticDistribution::categorical(vec![0.0, 1.0], vec![0.9, 0.1]).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - (0.5 * (0.5f64 / 0.9).ln() + 0.5 * 5f64.ln())).abs() < 1e-12);
        assert!((total_variation(&p, &q).unwrap() - 0.4).abs() < 1e-12);
        let r = AnalyticDistribution::categorical(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(check_pinsker(&p, &r), Err(Error::InfiniteKl)));
    }

    #[test]
    fn variance_gap_examples() {
        let p = tg(0.4, 0.1);
        let c = check_variance_gap(&p, &p, 1.0).unwrap();
        assert!(c.gap == 0.0 && c.holds);
        let c = check_variance_gap(&p, &tg(0.5, 0.1), 1.0).unwrap();
        assert!(c.epsilon > 0.0 && c.holds && c.gap <= c.bound);
        let wide = AnalyticDistribution::gaussian(0.0, 2.0).unwrap();
        assert!(check_variance_gap(&wide, &wide, 1.0).is_err());
        assert!(check_variance_gap(&p, &AnalyticDistribution::gaussian(0.4, 0.1).unwrap(), 1.0).is_err());
    }

    #[test]
    fn randomized_sweeps_have_no_violations() {
        for i in 0..100 {
            let (p, q) = random_gaussian_pair(2, i);
            assert!(check_pinsker(&p, &q).unwrap().holds);
        }
        for i in 0..200 {
            let (p, q) = random_truncated_pair(2, i);
            assert!(check_pinsker(&p, &q).unwrap().holds);
            assert!(check_variance_gap(&p, &q, 1.0).unwrap().holds);
        }
    }

    /// Forces the template `<think></think><answer>Ta Tb</answer>` with the two
    /// timestamps uniform over all bins.
    fn uniform_stamp_policy(cd: usize, temperature: f64) -> PolicyParams {
        use vocab::*;
        let mut p = PolicyParams::zeros(SIZE, cd, temperature).unwrap();
        let big = 60.0;
        let w = &mut p.weights;
        let allow = |m: &mut Vec<f64>, from: usize, to: usize| m[from * SIZE + to] = big;
        allow(&mut w.prev, EOS, THINK_OPEN);
        allow(&mut w.prev, THINK_OPEN, THINK_CLOSE);
        allow(&mut w.prev, THINK_CLOSE, ANSWER_OPEN);
        for k in 0..N_TIMESTAMPS {
            allow(&mut w.prev, ANSWER_OPEN, timestamp(k));
            // after the first stamp another stamp, after the second close
            allow(&mut w.prev2, ANSWER_OPEN, timestamp(k));
            allow(&mut w.prev2, timestamp(k), ANSWER_CLOSE);
        }
        // must beat the stamp-to-close entry that is still active via prev2
        w.prev[ANSWER_CLOSE * SIZE + EOS] = 2.0 * big;
        p
    }

    #[test]
    fn uniform_stamp_policy_matches_brute_force_std() {
        let cd = 4;
        let params = uniform_stamp_policy(cd, 1.0);
        let snap = PolicySnapshot::anchored_at(params);
        let sample = GroundingSample {
            id: "u".into(),
            similarity_profile: vec![0.0; 2],
            query_embedding: vec![0.0; 2],
            gt_interval: None,
            domain: crate::envgen::DomainTag::Target,
        };
        // parsed start is the smaller of two independent uniform bins
        let n = vocab::N_TIMESTAMPS;
        let (mut m1, mut m2) = (0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                let x = a.min(b) as f64 / 100.0;
                m1 += x;
                m2 += x * x;
            }
        }
        let total = (n * n) as f64;
        let (m1, m2) = (m1 / total, m2 / total);
        let sigma = (m2 - m1 * m1).sqrt();
        let g = 4000;
        let probes = probe_trained_policy(&snap, &[sample], &[g], 1).unwrap();
        assert_eq!(probes[0].n_valid, g);
        // std error of a sample std: sqrt((mu4 - sigma^4) / (4 G sigma^2)), bounded by sigma / sqrt(G) here
        let se = sigma / (g as f64).sqrt();
        assert!((probes[0].sigma_hat - sigma).abs() < 3.0 * se, "{} vs {sigma}", probes[0].sigma_hat);
    }

    #[test]
    fn near_greedy_policy_has_zero_spread() {
        let mut params = uniform_stamp_policy(4, 1.0);
        params.weights.bias[vocab::timestamp(30)] = 5.0;
        params.weights.bias[vocab::timestamp(70)] = 4.0;
        let snap = PolicySnapshot::anchored_at(params.with_temperature(1e-3));
        let sample = GroundingSample {
            id: "g".into(),
            similarity_profile: vec![0.0; 2],
            query_embedding: vec![0.0; 2],
            gt_interval: None,
            domain: crate::envgen::DomainTag::Target,
        };
        let probes = probe_trained_policy(&snap, &[sample], &[8, 64], 1).unwrap();
        assert!(probes.iter().all(|p| p.sigma_hat == 0.0 && p.sigma_hat_end == Some(0.0)));
    }
}
