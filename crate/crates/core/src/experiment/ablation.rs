//! Adaptation variants run against the shared source model of a pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalReport};
use super::pipeline::{paths, Pipeline, Stage};
use crate::artifacts::{to_jsonl, write_atomic};
use crate::envgen::subsample_target;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::{read_checkpoint, write_checkpoint};
use crate::rewards::RewardConfig;
use crate::urpa::{adapt_target, AdaptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Accuracy reward not scaled by confidence.
    NoConfidence,
    /// Neither boundary relaxation nor confidence.
    NoRelaxation,
    GammaSweep,
    GSweep,
    KSweep,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::NoConfidence,
        AblationVariant::NoRelaxation,
        AblationVariant::GammaSweep,
        AblationVariant::GSweep,
        AblationVariant::KSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoConfidence => "no_confidence",
            AblationVariant::NoRelaxation => "no_relaxation",
            AblationVariant::GammaSweep => "gamma_sweep",
            AblationVariant::GSweep => "g_sweep",
            AblationVariant::KSweep => "k_sweep",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::invalid(format!(
                "unknown ablation variant `{s}`; expected one of {}",
                names.join(", ")
            ))
        })
    }
}

/// The adaptation settings of one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSetting {
    pub grpo: GrpoConfig,
    pub adapt: AdaptConfig,
    pub reward: RewardConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full method.
    pub variant: Option<AblationVariant>,
    pub label: String,
    pub report: EvalReport,
    pub delta_miou: f64,
    pub delta_r_at: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub source_only: EvalReport,
    pub base: AblationRow,
    pub rows: Vec<AblationRow>,
    /// Max minus min mIoU over the gamma sweep, when it ran.
    pub gamma_spread: Option<f64>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        std::iter::once(&self.base)
            .chain(&self.rows)
            .find(|r| r.label == label)
    }
}

/// The `(label, setting)` rows of one variant.
pub fn variant_settings(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
) -> Vec<(String, AdaptSetting)> {
    let base = AdaptSetting {
        grpo: cfg.adapt_grpo,
        adapt: cfg.adapt,
        reward: cfg.reward,
    };
    let with = |f: &dyn Fn(&mut AdaptSetting)| {
        let mut s = base.clone();
        f(&mut s);
        s
    };
    match variant {
        AblationVariant::NoConfidence => vec![(
            variant.name().to_string(),
            with(&|s| s.adapt.use_confidence = false),
        )],
        AblationVariant::NoRelaxation => vec![(
            variant.name().to_string(),
            with(&|s| {
                s.adapt.use_confidence = false;
                s.reward.alpha = 0.0;
            }),
        )],
        AblationVariant::GammaSweep => cfg
            .ablation
            .gamma_values
            .iter()
            .map(|&g| {
                (
                    format!("gamma={g}"),
                    with(&|s| {
                        s.adapt.gamma = g;
                        s.reward.gamma = g;
                    }),
                )
            })
            .collect(),
        AblationVariant::GSweep => cfg
            .ablation
            .g_values
            .iter()
            .map(|&g| {
                (
                    format!("G={g}"),
                    with(&|s| {
                        s.grpo.group_size = g;
                        s.adapt.pseudo_group_size = None;
                    }),
                )
            })
            .collect(),
        AblationVariant::KSweep => cfg
            .ablation
            .k_values
            .iter()
            .map(|&k| (format!("K={k}"), with(&|s| s.adapt.k_shots = k)))
            .collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct VariantRecord {
    setting: AdaptSetting,
    report: EvalReport,
}

fn delta(report: &EvalReport, base: &EvalReport) -> (f64, BTreeMap<String, f64>) {
    let d = report
        .r_at
        .iter()
        .map(|(k, v)| (k.clone(), v - base.r_at.get(k).copied().unwrap_or(f64::NAN)))
        .collect();
    (report.miou - base.miou, d)
}

/// Runs the base pipeline, then every row of the requested variants with the
/// same seeds, source model and test set. Rows whose setting equals the base
/// setting reuse the base report.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[AblationVariant]) -> Result<AblationTable> {
    let mut pipeline = Pipeline::open(cfg)?;
    pipeline.run_until(Stage::EvalAdapted)?;
    let summary_seed = pipeline.seeds();
    let dir = pipeline.dir().join("ablation");
    let base_setting = AdaptSetting {
        grpo: cfg.adapt_grpo,
        adapt: cfg.adapt,
        reward: cfg.reward,
    };
    let read_report = |rel: &str| -> Result<EvalReport> {
        let path = pipeline.dir().join(rel);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    };
    let base_report = read_report(paths::ADAPTED_TARGET)?;
    let source_only = read_report(paths::SOURCE_TARGET)?;

    let mut unique = Vec::new();
    for &v in variants {
        if !unique.contains(&v) {
            unique.push(v);
        }
    }
    let mut rows = Vec::new();
    let mut gamma_mious = Vec::new();
    let mut target_test = None;
    let mut pool = None;
    for variant in unique {
        for (label, setting) in variant_settings(cfg, variant) {
            let report = if setting == base_setting {
                base_report.clone()
            } else {
                let vdir = dir.join(&label);
                let record_path = vdir.join("variant.json");
                let cached = fs::read_to_string(&record_path)
                    .ok()
                    .and_then(|t| serde_json::from_str::<VariantRecord>(&t).ok())
                    .filter(|r| r.setting == setting);
                match cached {
                    Some(r) => r.report,
                    None => {
                        let source = pipeline.checkpoint(paths::SOURCE_CKPT)?;
                        if pool.is_none() {
                            pool = Some(pipeline.dataset(paths::TARGET_POOL)?);
                            target_test = Some(pipeline.dataset(paths::TARGET_TEST)?);
                        }
                        let shots = subsample_target(
                            pool.as_ref().expect("pool loaded"),
                            setting.adapt.k_shots,
                            summary_seed.target_shots,
                        )?;
                        let grpo = GrpoConfig {
                            seed: summary_seed.adapt_grpo,
                            ..setting.grpo
                        };
                        let out = adapt_target(&source, &shots, &grpo, &setting.adapt, &setting.reward)?;
                        let ckpt = vdir.join("policy.ckpt");
                        write_checkpoint(&ckpt, &out.params)?;
                        let adapted = read_checkpoint(&ckpt)?;
                        let report = evaluate(
                            &adapted,
                            target_test.as_ref().expect("test set loaded"),
                            summary_seed.base,
                        )?;
                        let record = VariantRecord {
                            setting: setting.clone(),
                            report: report.clone(),
                        };
                        let text = serde_json::to_string_pretty(&record)? + "\n";
                        write_atomic(&record_path, text.as_bytes())?;
                        report
                    }
                }
            };
            if variant == AblationVariant::GammaSweep {
                gamma_mious.push(report.miou);
            }
            let (delta_miou, delta_r_at) = delta(&report, &base_report);
            rows.push(AblationRow {
                variant: Some(variant),
                label,
                report,
                delta_miou,
                delta_r_at,
            });
        }
    }
    let gamma_spread = (!gamma_mious.is_empty()).then(|| {
        let max = gamma_mious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = gamma_mious.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    });
    let (delta_miou, delta_r_at) = delta(&base_report, &base_report);
    let table = AblationTable {
        seed: cfg.seed,
        source_only,
        base: AblationRow {
            variant: None,
            label: "urpa".to_string(),
            report: base_report,
            delta_miou,
            delta_r_at,
        },
        rows,
        gamma_spread,
    };
    let lines: Vec<&AblationRow> = std::iter::once(&table.base).chain(&table.rows).collect();
    write_atomic(&dir.join("table.jsonl"), to_jsonl(&lines)?.as_bytes())?;
    Ok(table)
}
