//! Experiment configuration and its text format.
//!
//! A config file is a list of `key.path = value` lines applied on top of the
//! defaults. Values are JSON literals (`0.05`, `true`, `null`, `[4, 8]`,
//! `"runs/a"`); anything that does not parse as JSON is taken as a bare
//! string. `#` starts a comment. A file may pull in one other file with
//! `include = "path"`, resolved relative to the including file and applied
//! before the including file's own keys.
//!
//! ```text
//! include = "base.cfg"
//! seed = 3
//! adapt.k_shots = 100
//! target.feature_noise_sigma = 0.5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envgen::{DatasetManifest, DomainSpec, Split};
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::InitConfig;
use crate::rewards::RewardConfig;
use crate::urpa::AdaptConfig;

const MAX_INCLUDE_DEPTH: usize = 8;

/// Everything a pipeline run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; every split and stage derives its own seed from it.
    pub seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub n_source_train: usize,
    pub n_target_pool: usize,
    /// Size of each labelled test set (source and target).
    pub eval_set_size: usize,
    pub init: InitConfig,
    pub source_grpo: GrpoConfig,
    pub adapt_grpo: GrpoConfig,
    pub adapt: AdaptConfig,
    pub reward: RewardConfig,
    pub probe: ProbeConfig,
    pub ablation: SweepConfig,
    pub output_dir: PathBuf,
}

/// Rollout-std probes of the adapted policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub n_samples: usize,
    pub g_values: Vec<usize>,
}

/// Settings swept by the ablation variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub gamma_values: Vec<f64>,
    pub g_values: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            source: DomainSpec::default(),
            target: DomainSpec::shifted_target(),
            n_source_train: 32_000,
            n_target_pool: 2_000,
            eval_set_size: 500,
            init: InitConfig::default(),
            // A strong KL anchor keeps rollouts diverse enough for
            // group-relative advantages to stay informative; with the
            // default beta the policy collapses onto a few answers.
            source_grpo: GrpoConfig {
                learning_rate: 0.03,
                beta: 1.0,
                ..GrpoConfig::default()
            },
            adapt_grpo: GrpoConfig::default(),
            adapt: AdaptConfig::default(),
            reward: RewardConfig::default(),
            probe: ProbeConfig {
                n_samples: 50,
                g_values: vec![4, 8, 16, 32, 64],
            },
            ablation: SweepConfig {
                gamma_values: vec![2.0, 5.0, 10.0, 25.0],
                g_values: vec![4, 8, 16, 32],
                k_values: vec![100, 200],
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Validates every component and their consistency.
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        self.init_validate()?;
        self.source_grpo.validate()?;
        self.adapt_grpo.validate()?;
        self.adapt.validate()?;
        self.reward.validate()?;
        if self.source.context_dim() != self.target.context_dim() {
            return Err(Error::invalid(
                "source and target must share profile_length and embed_dim",
            ));
        }
        if self.n_source_train == 0 || self.n_target_pool == 0 || self.eval_set_size == 0 {
            return Err(Error::invalid("dataset sizes must be >= 1"));
        }
        if self.reward.gamma != self.adapt.gamma {
            return Err(Error::invalid(format!(
                "reward.gamma = {} disagrees with adapt.gamma = {}",
                self.reward.gamma, self.adapt.gamma
            )));
        }
        let mut ks = vec![self.adapt.k_shots];
        ks.extend(&self.ablation.k_values);
        for &k in &ks {
            self.check_shots(k)?;
        }
        if self.probe.g_values.iter().any(|&g| g < 2) {
            return Err(Error::invalid("probe.g_values must all be >= 2"));
        }
        if self.ablation.g_values.iter().any(|&g| g < 2) {
            return Err(Error::invalid("ablation.g_values must all be >= 2"));
        }
        if self
            .ablation
            .gamma_values
            .iter()
            .any(|&g| !(g.is_finite() && g > 0.0))
        {
            return Err(Error::invalid("ablation.gamma_values must all be > 0"));
        }
        Ok(())
    }

    fn init_validate(&self) -> Result<()> {
        let i = &self.init;
        if !(i.temperature.is_finite() && i.temperature > 0.0)
            || !(i.init_scale.is_finite() && i.init_scale >= 0.0)
            || !i.format_prior.is_finite()
        {
            return Err(Error::invalid(
                "init needs temperature > 0, init_scale >= 0 and a finite format_prior",
            ));
        }
        Ok(())
    }

    fn check_shots(&self, k: usize) -> Result<()> {
        if k > self.n_target_pool {
            return Err(Error::invalid(format!(
                "K = {k} target shots exceeds the target pool of {}",
                self.n_target_pool
            )));
        }
        DatasetManifest::check_few_shot(&self.source_train_manifest(), k)
    }

    pub(crate) fn source_train_manifest(&self) -> DatasetManifest {
        DatasetManifest {
            n_samples: self.n_source_train,
            seed: self.seed,
            domain_params: self.source.clone(),
            split: Split::Train,
        }
    }

    /// Sets the confidence sharpness in both places it is recorded.
    pub fn set_gamma(&mut self, gamma: f64) {
        self.adapt.gamma = gamma;
        self.reward.gamma = gamma;
    }

    /// Reads a config file (and its include) over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        apply_file(&mut value, path, 0)?;
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Applies `key.path = value` assignments given as strings.
    pub fn with_overrides(&self, assignments: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for (key, raw) in assignments {
            assign(&mut value, key, parse_value(raw)).map_err(Error::Invalid)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    /// The config as sorted `key.path = value` lines, which [`Self::from_file`]
    /// reads back to an equal config.
    pub fn to_flat_text(&self) -> Result<String> {
        let mut lines = Vec::new();
        flatten(&serde_json::to_value(self)?, String::new(), &mut lines);
        lines.sort();
        let mut out = String::new();
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        Ok(out)
    }
}

fn flatten(value: &Value, prefix: String, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(v, key, out);
            }
        }
        leaf => out.push(format!("{prefix} = {leaf}")),
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn same_kind(old: &Value, new: &Value) -> bool {
    matches!(
        (old, new),
        (Value::Null, _)
            | (_, Value::Null)
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
    )
}

fn assign(root: &mut Value, key: &str, new: Value) -> std::result::Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key `{key}`"));
    }
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not a section", parts[..i].join(".")))?;
        node = map
            .get_mut(*part)
            .ok_or_else(|| format!("unknown key `{key}`"))?;
    }
    if node.is_object() {
        return Err(format!("`{key}` is a section; set its fields individually"));
    }
    if !same_kind(node, &new) {
        return Err(format!("`{key}` expects a value like {node}, got {new}"));
    }
    *node = new;
    Ok(())
}

fn apply_file(root: &mut Value, path: &Path, depth: usize) -> Result<()> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::invalid(format!(
            "includes nested deeper than {MAX_INCLUDE_DEPTH} at {}",
            path.display()
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    let mut include = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), parse_value(value.trim()));
        if key == "include" {
            let target = value
                .as_str()
                .ok_or_else(|| err(line_no, "include expects a path".into()))?;
            if include.is_some() {
                return Err(err(line_no, "only one include directive is allowed".into()));
            }
            include = Some(target.to_string());
        } else {
            entries.push((line_no, key.to_string(), value));
        }
    }
    if let Some(inc) = include {
        let base = path.parent().unwrap_or(Path::new("."));
        apply_file(root, &base.join(inc), depth + 1)?;
    }
    for (line_no, key, value) in entries {
        assign(root, &key, value).map_err(|m| err(line_no, m))?;
    }
    Ok(())
}
