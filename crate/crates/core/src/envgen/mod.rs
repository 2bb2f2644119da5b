//! Synthetic temporal-grounding domains with controllable shift.
//!
//! A "video" is reduced to the similarity profile a perception stack would
//! produce: per-frame cosine similarity against the query embedding. Frames
//! inside the event carry the query's class mean, frames outside carry a
//! background feature orthogonal to every class, and additive Gaussian noise
//! perturbs every frame. The query encoder of a domain may be rotated away
//! from the frame encoder by `class_rotation_angle`, which lowers the in-event
//! similarity to `cos(angle)`.
//!
//! Four knobs separate two domains: the event-duration distribution, a
//! systematic annotation bias on labelled boundaries, feature noise, and the
//! class rotation.

mod io;

pub use io::{read_dataset, read_dataset_file, write_dataset, DatasetHeader, DATASET_VERSION};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{clamp_interval, TimeInterval};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One `<video, query>` pair.
///
/// Target samples produced by the generator keep their labels so that
/// evaluation can score them; [`subsample_target`] strips them before they
/// reach adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub id: String,
    pub similarity_profile: Vec<f32>,
    pub query_embedding: Vec<f32>,
    pub gt_interval: Option<TimeInterval>,
    pub domain: DomainTag,
}

impl GroundingSample {
    /// Policy context: the similarity profile followed by the query embedding.
    pub fn context(&self) -> Vec<f64> {
        self.similarity_profile
            .iter()
            .chain(self.query_embedding.iter())
            .map(|&x| f64::from(x))
            .collect()
    }

    pub fn context_dim(&self) -> usize {
        self.similarity_profile.len() + self.query_embedding.len()
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Beta-distribution shape parameters of the event duration (fraction of video).
    pub duration_shape_a: f64,
    pub duration_shape_b: f64,
    /// Shift applied to labelled boundaries, as a fraction of the event duration.
    pub annotation_bias: f64,
    pub feature_noise_sigma: f64,
    /// Radians between the query encoder and the frame encoder.
    pub class_rotation_angle: f64,
    pub n_query_classes: usize,
    pub profile_length: usize,
    pub embed_dim: usize,
}

impl Default for DomainSpec {
    /// The noiseless source domain used throughout the benchmark.
    fn default() -> Self {
        Self {
            duration_shape_a: 2.0,
            duration_shape_b: 6.0,
            annotation_bias: 0.0,
            feature_noise_sigma: 0.0,
            class_rotation_angle: 0.0,
            n_query_classes: 4,
            profile_length: 50,
            embed_dim: 8,
        }
    }
}

impl DomainSpec {
    /// The standard shifted target: biased annotations, longer events, noisier
    /// frames and a rotated query encoder.
    pub fn shifted_target() -> Self {
        Self {
            duration_shape_a: 4.0,
            duration_shape_b: 5.0,
            annotation_bias: 0.05,
            feature_noise_sigma: 1.0,
            class_rotation_angle: 0.6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.duration_shape_a) || !positive(self.duration_shape_b) {
            return Err(Error::invalid("duration shape parameters must be positive"));
        }
        if !self.annotation_bias.is_finite() || !self.class_rotation_angle.is_finite() {
            return Err(Error::invalid("annotation bias and rotation must be finite"));
        }
        if !self.feature_noise_sigma.is_finite() || self.feature_noise_sigma < 0.0 {
            return Err(Error::invalid("feature_noise_sigma must be >= 0"));
        }
        if self.profile_length < 8 {
            return Err(Error::invalid("profile_length must be >= 8"));
        }
        if self.embed_dim < 4 {
            return Err(Error::invalid("embed_dim must be >= 4"));
        }
        if self.n_query_classes < 2 {
            return Err(Error::invalid("n_query_classes must be >= 2"));
        }
        Ok(())
    }

    pub fn mean_duration(&self) -> f64 {
        self.duration_shape_a / (self.duration_shape_a + self.duration_shape_b)
    }

    pub fn context_dim(&self) -> usize {
        self.profile_length + self.embed_dim
    }
}

/// Provenance of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: usize,
    pub seed: u64,
    pub domain_params: DomainSpec,
    pub split: Split,
}

impl DatasetManifest {
    /// Checks the `K << N` relation (`K <= N / 10`) between a labelled source
    /// training set and a target adaptation budget.
    pub fn check_few_shot(source: &DatasetManifest, k_shots: usize) -> Result<()> {
        if k_shots == 0 || k_shots * 10 > source.n_samples {
            return Err(Error::invalid(format!(
                "K = {k_shots} target shots violates K <= N/10 for N = {}",
                source.n_samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub n_generated: usize,
    pub mean_event_duration: f64,
    pub mean_profile_snr: f64,
    pub seed: u64,
}

struct Generated {
    sample: GroundingSample,
    duration: f64,
    snr: Option<f64>,
}

/// Generates `n` samples of a domain. `labelled` selects the source tag;
/// target samples still carry their (hidden) labels for evaluation.
pub fn generate_domain(
    spec: &DomainSpec,
    n: usize,
    seed: u64,
    labelled: bool,
) -> Result<(Vec<GroundingSample>, GenerationReport)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot generate an empty domain"));
    }
    let duration_dist = Beta::new(spec.duration_shape_a, spec.duration_shape_b)
        .map_err(|e| Error::invalid(format!("duration distribution: {e}")))?;
    let domain = if labelled {
        DomainTag::Source
    } else {
        DomainTag::Target
    };

    let generated: Vec<Generated> = (0..n)
        .into_par_iter()
        .map(|i| generate_one(spec, &duration_dist, seed, i, domain))
        .collect::<Result<_>>()?;

    let mean_event_duration = generated.iter().map(|g| g.duration).sum::<f64>() / n as f64;
    let snrs: Vec<f64> = generated.iter().filter_map(|g| g.snr).collect();
    let mean_profile_snr = if snrs.is_empty() {
        0.0
    } else {
        snrs.iter().sum::<f64>() / snrs.len() as f64
    };
    let report = GenerationReport {
        n_generated: n,
        mean_event_duration,
        mean_profile_snr,
        seed,
    };
    Ok((generated.into_iter().map(|g| g.sample).collect(), report))
}

fn generate_one(
    spec: &DomainSpec,
    duration_dist: &Beta<f64>,
    seed: u64,
    index: usize,
    domain: DomainTag,
) -> Result<Generated> {
    let mut rng = rng::stream(seed, &[tag::GENERATE, index as u64]);
    let class = rng.random_range(0..spec.n_query_classes);
    let duration: f64 = duration_dist.sample(&mut rng);
    let start = rng.random::<f64>() * (1.0 - duration);
    let end = start + duration;

    let elevation = spec.class_rotation_angle.cos();
    let len = spec.profile_length;
    let mut inside = Vec::with_capacity(len);
    let profile: Vec<f32> = (0..len)
        .map(|l| {
            let centre = (l as f64 + 0.5) / len as f64;
            let in_event = centre >= start && centre <= end;
            inside.push(in_event);
            let noise: f64 = rng.sample(StandardNormal);
            let clean = if in_event { elevation } else { 0.0 };
            (clean + spec.feature_noise_sigma * noise).clamp(-1.0, 1.0) as f32
        })
        .collect();

    let d = spec.embed_dim;
    let mut query = vec![0.0f32; d];
    let axis = class % d;
    query[axis] = spec.class_rotation_angle.cos() as f32;
    query[(axis + 1) % d] += spec.class_rotation_angle.sin() as f32;

    let shift = spec.annotation_bias * duration;
    let labelled = clamp_interval(start + shift, end + shift)?.interval;
    // Snap to f32 so that the 9-digit file format round-trips exactly.
    let gt = TimeInterval::new(
        f64::from(labelled.start() as f32),
        f64::from(labelled.end() as f32),
    )?;

    Ok(Generated {
        sample: GroundingSample {
            id: format!("{}-{index:06}", domain_prefix(domain)),
            similarity_profile: profile.clone(),
            query_embedding: query,
            gt_interval: Some(gt),
            domain,
        },
        duration,
        snr: profile_snr(&profile, &inside),
    })
}

fn domain_prefix(domain: DomainTag) -> &'static str {
    match domain {
        DomainTag::Source => "src",
        DomainTag::Target => "tgt",
    }
}

/// In-event minus out-of-event mean, over the pooled within-group deviation.
fn profile_snr(profile: &[f32], inside: &[bool]) -> Option<f64> {
    let (mut n_in, mut n_out, mut sum_in, mut sum_out) = (0usize, 0usize, 0.0, 0.0);
    for (&x, &inn) in profile.iter().zip(inside) {
        if inn {
            n_in += 1;
            sum_in += f64::from(x);
        } else {
            n_out += 1;
            sum_out += f64::from(x);
        }
    }
    if n_in == 0 || n_out == 0 || n_in + n_out < 3 {
        return None;
    }
    let (m_in, m_out) = (sum_in / n_in as f64, sum_out / n_out as f64);
    let ss: f64 = profile
        .iter()
        .zip(inside)
        .map(|(&x, &inn)| {
            let m = if inn { m_in } else { m_out };
            (f64::from(x) - m).powi(2)
        })
        .sum();
    let sd = (ss / (n_in + n_out - 2) as f64).sqrt();
    Some((m_in - m_out) / sd.max(1e-6))
}

/// Draws `k` samples uniformly without replacement and strips their labels.
pub fn subsample_target(
    dataset: &[GroundingSample],
    k: usize,
    seed: u64,
) -> Result<Vec<GroundingSample>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > dataset.len() {
        return Err(Error::invalid(format!(
            "cannot draw {k} samples from a pool of {}",
            dataset.len()
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SUBSAMPLE]);
    Ok(index::sample(&mut rng, dataset.len(), k)
        .into_iter()
        .map(|i| GroundingSample {
            gt_interval: None,
            ..dataset[i].clone()
        })
        .collect())
}
