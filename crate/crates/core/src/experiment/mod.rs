//! Evaluation metrics, experiment configuration, the staged pipeline and
//! ablation sweeps.

mod ablation;
mod config;
mod eval;
mod pipeline;

pub use ablation::{run_ablation, variant_settings, AblationRow, AblationTable, AblationVariant, AdaptSetting};
pub use config::{ExperimentConfig, ProbeConfig, SweepConfig};
pub use eval::{evaluate, report_from_scores, threshold_key, EvalReport, RECALL_THRESHOLDS};
pub use pipeline::{
    paths, run_experiment, AdaptSummary, GeneratedSplit, NamedReport, Pipeline, RunManifest, RunSeeds, RunSummary,
    StabilizationReport, Stage, StageRecord, CONFIG_FILE, MANIFEST_FILE, REPORTS_FILE,
};

#[cfg(test)]
pub(crate) mod test_support {
    use std::path::Path;

    use super::ExperimentConfig;

    /// A config small enough for unit tests.
    pub(crate) fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.n_source_train = 480;
        cfg.n_target_pool = 60;
        cfg.eval_set_size = 40;
        cfg.adapt.k_shots = 32;
        cfg.ablation.k_values = vec![16, 32];
        cfg.probe.n_samples = 5;
        cfg.probe.g_values = vec![4, 8];
        cfg.output_dir = dir.to_path_buf();
        cfg
    }
}
