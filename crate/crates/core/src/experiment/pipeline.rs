//! The staged experiment: generate, train on the source, evaluate, adapt to
//! the target, evaluate again, and probe the adapted policy's rollout spread.
//!
//! Each stage records the SHA-256 of every file it writes in `manifest.json`.
//! Re-running a config in the same output directory skips every stage whose
//! outputs are still intact and reruns the rest. Later stages always read
//! their inputs back from disk, so a resumed run and a fresh run see the same
//! bytes and produce identical reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalReport};
use crate::artifacts::{sha256_hex, to_jsonl, write_atomic};
use crate::envgen::{
    generate_domain, read_dataset, subsample_target, write_dataset, DatasetManifest,
    GenerationReport, GroundingSample, Split,
};
use crate::error::{Error, Result};
use crate::grpo::{train_source, StepLog};
use crate::policy::{read_checkpoint, write_checkpoint, PolicyParams, PolicySnapshot};
use crate::rng::derive_seed;
use crate::theory::{probe_trained_policy, stabilization, write_probes};
use crate::urpa::{adapt_target, write_pseudo_labels};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.cfg";
pub const REPORTS_FILE: &str = "reports.jsonl";

pub mod paths {
    pub const SOURCE_TRAIN: &str = "data/source_train.jsonl";
    pub const SOURCE_TEST: &str = "data/source_test.jsonl";
    pub const TARGET_POOL: &str = "data/target_pool.jsonl";
    pub const TARGET_TEST: &str = "data/target_test.jsonl";
    pub const TARGET_SHOTS: &str = "data/target_shots.jsonl";
    pub const GENERATION: &str = "data/generation.json";
    pub const INIT_CKPT: &str = "source/init.ckpt";
    pub const SOURCE_CKPT: &str = "source/policy.ckpt";
    pub const SOURCE_LOG: &str = "source/train_log.jsonl";
    pub const ADAPT_CKPT: &str = "adapt/policy.ckpt";
    pub const ADAPT_LOG: &str = "adapt/train_log.jsonl";
    pub const PSEUDO_LABELS: &str = "adapt/pseudo_labels.jsonl";
    pub const ADAPT_SUMMARY: &str = "adapt/summary.json";
    pub const UNTRAINED_SOURCE: &str = "reports/untrained_source.json";
    pub const SOURCE_SOURCE: &str = "reports/source_on_source.json";
    pub const SOURCE_TARGET: &str = "reports/source_only_target.json";
    pub const ADAPTED_TARGET: &str = "reports/adapted_target.json";
    pub const PROBES: &str = "theory/probes.jsonl";
    pub const STABILIZATION: &str = "theory/stabilization.json";
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    TrainSource,
    EvalSource,
    Adapt,
    EvalAdapted,
    Probe,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::TrainSource,
        Stage::EvalSource,
        Stage::Adapt,
        Stage::EvalAdapted,
        Stage::Probe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "gen",
            Stage::TrainSource => "train-source",
            Stage::EvalSource => "eval-source",
            Stage::Adapt => "adapt",
            Stage::EvalAdapted => "eval-adapted",
            Stage::Probe => "probe",
        }
    }
}

/// Seeds of every split and stage, derived from the run's base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub base: u64,
    pub source_train: u64,
    pub source_test: u64,
    pub target_pool: u64,
    pub target_test: u64,
    pub target_shots: u64,
    pub init: u64,
    pub source_grpo: u64,
    pub adapt_grpo: u64,
    pub probe: u64,
}

impl RunSeeds {
    pub fn derive(base: u64) -> Self {
        let d = |label| derive_seed(base, label);
        Self {
            base,
            source_train: d("source-train"),
            source_test: d("source-test"),
            target_pool: d("target-pool"),
            target_test: d("target-test"),
            target_shots: d("target-shots"),
            init: d("init"),
            source_grpo: d("source-grpo"),
            adapt_grpo: d("adapt-grpo"),
            probe: d("probe"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seeds: RunSeeds,
    pub stages: Vec<StageRecord>,
}

/// Provenance of one generated split, as recorded in `data/generation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSplit {
    pub name: String,
    pub manifest: DatasetManifest,
    pub report: GenerationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub n_shots: usize,
    pub n_usable: usize,
    pub n_unusable: usize,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationReport {
    pub g_values: Vec<usize>,
    /// Median over samples of the change in rollout std between consecutive
    /// group sizes.
    pub median_abs_change: Vec<f64>,
}

/// One named report in `reports.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// The metrics of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seeds: RunSeeds,
    pub untrained_source: EvalReport,
    pub source_on_source: EvalReport,
    pub source_only_target: EvalReport,
    pub adapted_target: EvalReport,
    pub adapt: AdaptSummary,
    pub stabilization: StabilizationReport,
    /// Stages found complete on disk and skipped.
    pub reused: Vec<Stage>,
}

/// An experiment bound to its output directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    seeds: RunSeeds,
    manifest: RunManifest,
    reused: Vec<Stage>,
    /// Set once a stage has run in this session; every later stage reruns.
    dirty: bool,
}

impl Pipeline {
    /// Validates the config and opens (or resumes) its output directory.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.clone();
        let config_text = cfg.to_flat_text()?;
        let config_sha256 = sha256_hex(config_text.as_bytes());
        let seeds = RunSeeds::derive(cfg.seed);
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            let text =
                fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let m: RunManifest = serde_json::from_str(&text)?;
            if m.config_sha256 != config_sha256 {
                return Err(Error::invalid(format!(
                    "{} holds a run of a different config; choose another output directory",
                    dir.display()
                )));
            }
            m
        } else {
            RunManifest {
                config_sha256,
                seeds,
                stages: Vec::new(),
            }
        };
        write_atomic(&dir.join(CONFIG_FILE), config_text.as_bytes())?;
        Ok(Self {
            cfg: cfg.clone(),
            dir,
            seeds,
            manifest,
            reused: Vec::new(),
            dirty: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn seeds(&self) -> RunSeeds {
        self.seeds
    }

    /// Runs (or verifies) every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().take_while(|&s| s <= last) {
            if !self.dirty && self.is_complete(stage) {
                if !self.reused.contains(&stage) {
                    self.reused.push(stage);
                }
                continue;
            }
            self.dirty = true;
            let outputs = self.run_stage(stage)?;
            self.record(stage, outputs)?;
        }
        Ok(())
    }

    /// Runs every stage and collects the reports.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.run_until(Stage::Probe)?;
        self.summary()
    }

    pub fn generated_splits(&self) -> Result<Vec<GeneratedSplit>> {
        self.read_json(paths::GENERATION)
    }

    pub fn adapt_summary(&self) -> Result<AdaptSummary> {
        self.read_json(paths::ADAPT_SUMMARY)
    }

    /// Reads one of the JSON reports under `reports/`.
    pub fn report(&self, rel: &str) -> Result<EvalReport> {
        self.read_json(rel)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        Ok(RunSummary {
            dir: self.dir.clone(),
            seeds: self.seeds,
            untrained_source: self.read_json(paths::UNTRAINED_SOURCE)?,
            source_on_source: self.read_json(paths::SOURCE_SOURCE)?,
            source_only_target: self.read_json(paths::SOURCE_TARGET)?,
            adapted_target: self.read_json(paths::ADAPTED_TARGET)?,
            adapt: self.read_json(paths::ADAPT_SUMMARY)?,
            stabilization: self.read_json(paths::STABILIZATION)?,
            reused: self.reused.clone(),
        })
    }

    fn is_complete(&self, stage: Stage) -> bool {
        let Some(rec) = self.manifest.stages.iter().find(|r| r.stage == stage.name()) else {
            return false;
        };
        rec.outputs.iter().all(|(rel, sha)| {
            fs::read(self.dir.join(rel)).is_ok_and(|bytes| sha256_hex(&bytes) == *sha)
        })
    }

    fn record(&mut self, stage: Stage, outputs: Vec<&'static str>) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for rel in outputs {
            let path = self.dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            hashes.insert(rel.to_string(), sha256_hex(&bytes));
        }
        // later stages depend on this one and are stale now
        let pos = Stage::ALL.iter().position(|&s| s == stage).unwrap_or(0);
        let earlier: Vec<&str> = Stage::ALL[..pos].iter().map(|s| s.name()).collect();
        self.manifest.stages.retain(|r| earlier.contains(&r.stage.as_str()));
        self.manifest.stages.push(StageRecord {
            stage: stage.name().to_string(),
            outputs: hashes,
        });
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    fn run_stage(&self, stage: Stage) -> Result<Vec<&'static str>> {
        match stage {
            Stage::Generate => self.generate(),
            Stage::TrainSource => self.train(),
            Stage::EvalSource => self.eval_source(),
            Stage::Adapt => self.adapt(),
            Stage::EvalAdapted => self.eval_adapted(),
            Stage::Probe => self.probe(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn dataset(&self, rel: &str) -> Result<Vec<GroundingSample>> {
        read_dataset(&self.path(rel))
    }

    pub fn checkpoint(&self, rel: &str) -> Result<PolicyParams> {
        read_checkpoint(&self.path(rel))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        write_atomic(&self.path(rel), text.as_bytes())
    }

    fn generate(&self) -> Result<Vec<&'static str>> {
        let c = &self.cfg;
        let s = &self.seeds;
        let splits = [
            ("source_train", paths::SOURCE_TRAIN, &c.source, c.n_source_train, s.source_train, true, Split::Train),
            ("source_test", paths::SOURCE_TEST, &c.source, c.eval_set_size, s.source_test, true, Split::Test),
            ("target_pool", paths::TARGET_POOL, &c.target, c.n_target_pool, s.target_pool, false, Split::Train),
            ("target_test", paths::TARGET_TEST, &c.target, c.eval_set_size, s.target_test, false, Split::Test),
        ];
        let mut records = Vec::new();
        for (name, rel, spec, n, seed, labelled, split) in splits {
            let (samples, report) = generate_domain(spec, n, seed, labelled)?;
            write_dataset(&self.path(rel), &samples, Some(spec))?;
            records.push(GeneratedSplit {
                name: name.to_string(),
                manifest: DatasetManifest {
                    n_samples: n,
                    seed,
                    domain_params: spec.clone(),
                    split,
                },
                report,
            });
        }
        let pool = self.dataset(paths::TARGET_POOL)?;
        let shots = subsample_target(&pool, c.adapt.k_shots, s.target_shots)?;
        write_dataset(&self.path(paths::TARGET_SHOTS), &shots, Some(&c.target))?;
        self.write_json(paths::GENERATION, &records)?;
        Ok(vec![
            paths::SOURCE_TRAIN,
            paths::SOURCE_TEST,
            paths::TARGET_POOL,
            paths::TARGET_TEST,
            paths::TARGET_SHOTS,
            paths::GENERATION,
        ])
    }

    fn train(&self) -> Result<Vec<&'static str>> {
        let c = &self.cfg;
        let data = self.dataset(paths::SOURCE_TRAIN)?;
        let init = PolicyParams::initialize(c.source.context_dim(), &c.init, self.seeds.init)?;
        write_checkpoint(&self.path(paths::INIT_CKPT), &init)?;
        let init = self.checkpoint(paths::INIT_CKPT)?;
        let grpo = crate::grpo::GrpoConfig {
            seed: self.seeds.source_grpo,
            ..c.source_grpo
        };
        let out = train_source(&data, PolicySnapshot::anchored_at(init), &grpo, &c.reward)?;
        write_checkpoint(&self.path(paths::SOURCE_CKPT), &out.params)?;
        write_log(&self.path(paths::SOURCE_LOG), &out.log)?;
        Ok(vec![paths::INIT_CKPT, paths::SOURCE_CKPT, paths::SOURCE_LOG])
    }

    fn eval_source(&self) -> Result<Vec<&'static str>> {
        let seed = self.seeds.base;
        let source_test = self.dataset(paths::SOURCE_TEST)?;
        let target_test = self.dataset(paths::TARGET_TEST)?;
        let init = self.checkpoint(paths::INIT_CKPT)?;
        let trained = self.checkpoint(paths::SOURCE_CKPT)?;
        self.write_json(paths::UNTRAINED_SOURCE, &evaluate(&init, &source_test, seed)?)?;
        self.write_json(paths::SOURCE_SOURCE, &evaluate(&trained, &source_test, seed)?)?;
        self.write_json(paths::SOURCE_TARGET, &evaluate(&trained, &target_test, seed)?)?;
        Ok(vec![
            paths::UNTRAINED_SOURCE,
            paths::SOURCE_SOURCE,
            paths::SOURCE_TARGET,
        ])
    }

    fn adapt(&self) -> Result<Vec<&'static str>> {
        let c = &self.cfg;
        let source = self.checkpoint(paths::SOURCE_CKPT)?;
        let shots = self.dataset(paths::TARGET_SHOTS)?;
        let grpo = crate::grpo::GrpoConfig {
            seed: self.seeds.adapt_grpo,
            ..c.adapt_grpo
        };
        let out = adapt_target(&source, &shots, &grpo, &c.adapt, &c.reward)?;
        write_checkpoint(&self.path(paths::ADAPT_CKPT), &out.params)?;
        write_log(&self.path(paths::ADAPT_LOG), &out.log)?;
        write_pseudo_labels(&self.path(paths::PSEUDO_LABELS), &out.pseudo_labels)?;
        let n_usable = out.pseudo_labels.len();
        let mut cs: Vec<f64> = out.pseudo_labels.iter().map(|l| l.c).collect();
        cs.sort_by(f64::total_cmp);
        self.write_json(
            paths::ADAPT_SUMMARY,
            &AdaptSummary {
                n_shots: shots.len(),
                n_usable,
                n_unusable: out.n_unusable,
                mean_confidence: cs.iter().sum::<f64>() / n_usable as f64,
            },
        )?;
        Ok(vec![
            paths::ADAPT_CKPT,
            paths::ADAPT_LOG,
            paths::PSEUDO_LABELS,
            paths::ADAPT_SUMMARY,
        ])
    }

    fn eval_adapted(&self) -> Result<Vec<&'static str>> {
        let target_test = self.dataset(paths::TARGET_TEST)?;
        let adapted = self.checkpoint(paths::ADAPT_CKPT)?;
        let report = evaluate(&adapted, &target_test, self.seeds.base)?;
        self.write_json(paths::ADAPTED_TARGET, &report)?;
        let named = [
            ("untrained_source", paths::UNTRAINED_SOURCE),
            ("source_on_source", paths::SOURCE_SOURCE),
            ("source_only_target", paths::SOURCE_TARGET),
            ("adapted_target", paths::ADAPTED_TARGET),
        ]
        .into_iter()
        .map(|(name, rel)| {
            Ok(NamedReport {
                name: name.to_string(),
                report: self.read_json(rel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
        write_atomic(&self.path(REPORTS_FILE), to_jsonl(&named)?.as_bytes())?;
        Ok(vec![paths::ADAPTED_TARGET, REPORTS_FILE])
    }

    fn probe(&self) -> Result<Vec<&'static str>> {
        let c = &self.cfg;
        let adapted = self.checkpoint(paths::ADAPT_CKPT)?;
        let mut samples = self.dataset(paths::TARGET_TEST)?;
        samples.truncate(c.probe.n_samples);
        for s in &mut samples {
            s.gt_interval = None;
        }
        let snapshot = PolicySnapshot::anchored_at(adapted);
        let probes = probe_trained_policy(&snapshot, &samples, &c.probe.g_values, self.seeds.probe)?;
        write_probes(&self.path(paths::PROBES), &probes)?;
        self.write_json(
            paths::STABILIZATION,
            &StabilizationReport {
                g_values: c.probe.g_values.clone(),
                median_abs_change: stabilization(&probes, &c.probe.g_values),
            },
        )?;
        Ok(vec![paths::PROBES, paths::STABILIZATION])
    }
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    write_atomic(path, to_jsonl(log)?.as_bytes())
}

/// Runs the full pipeline for `cfg`, resuming from whatever is already
/// complete in its output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    Pipeline::open(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::test_support::tiny_config;

    #[test]
    fn seeds_differ_per_split() {
        let s = RunSeeds::derive(1);
        let all = [
            s.source_train,
            s.source_test,
            s.target_pool,
            s.target_test,
            s.target_shots,
            s.init,
            s.source_grpo,
            s.adapt_grpo,
            s.probe,
        ];
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(RunSeeds::derive(1), s);
    }

    #[test]
    fn too_many_shots_fail_before_any_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("run"));
        cfg.adapt.k_shots = cfg.n_target_pool + 1;
        assert!(matches!(run_experiment(&cfg), Err(Error::Invalid(_))));
        assert!(!dir.path().join("run").exists());
    }

    #[test]
    fn runs_resume_and_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(&dir.path().join("a"));
        let first = run_experiment(&cfg).unwrap();
        assert!(first.reused.is_empty());
        assert_eq!(first.adapt.n_shots, 32);
        let reports = fs::read(cfg.output_dir.join(REPORTS_FILE)).unwrap();

        // everything is intact: nothing reruns
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(again.reused, Stage::ALL.to_vec());
        assert_eq!(again.adapted_target, first.adapted_target);

        // a damaged adaptation output reruns adaptation and what follows
        fs::write(cfg.output_dir.join(paths::ADAPT_SUMMARY), "{}").unwrap();
        let resumed = run_experiment(&cfg).unwrap();
        assert_eq!(
            resumed.reused,
            vec![Stage::Generate, Stage::TrainSource, Stage::EvalSource]
        );
        assert_eq!(fs::read(cfg.output_dir.join(REPORTS_FILE)).unwrap(), reports);

        // a fresh directory reproduces every report byte for byte
        let other = ExperimentConfig {
            output_dir: dir.path().join("b"),
            ..cfg.clone()
        };
        run_experiment(&other).unwrap();
        assert_eq!(fs::read(other.output_dir.join(REPORTS_FILE)).unwrap(), reports);
        for rel in [paths::ADAPTED_TARGET, paths::PROBES, paths::SOURCE_CKPT] {
            assert_eq!(
                fs::read(cfg.output_dir.join(rel)).unwrap(),
                fs::read(other.output_dir.join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn a_different_config_cannot_reuse_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let mut p = Pipeline::open(&cfg).unwrap();
        p.run_until(Stage::Generate).unwrap();
        let changed = ExperimentConfig {
            seed: 99,
            ..cfg
        };
        assert!(Pipeline::open(&changed).is_err());
    }
}
