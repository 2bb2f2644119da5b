//! `urpa`: generate synthetic domains, train on the source, adapt to the
//! target, evaluate, sweep ablations and check the rollout-variance theorem.

mod table;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use urpa_core::experiment::{
    evaluate, paths, run_ablation, AblationVariant, ExperimentConfig, Pipeline, Stage,
};
use urpa_core::policy::read_checkpoint;
use urpa_core::theory::{run_theorem_suite, TheoremSuiteConfig};
use urpa_core::{envgen, Error};

const THREADS_VAR: &str = "URPA_THREADS";

#[derive(Parser, Debug)]
#[command(name = "urpa", version, about)]
struct Cli {
    /// Config file of `key.path = value` lines; defaults apply otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed of the run.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of unlabelled target samples used for adaptation.
    #[arg(long, global = true, value_name = "K")]
    shots: Option<usize>,
    /// Confidence sharpness of the pseudo labels.
    #[arg(long, global = true, value_name = "F")]
    gamma: Option<f64>,
    /// Rollouts per group during adaptation.
    #[arg(long, global = true, value_name = "N")]
    rollouts: Option<usize>,
    /// Extra `key.path=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source and target datasets.
    Gen,
    /// Train on the labelled source domain and evaluate it.
    TrainSource,
    /// Adapt the source policy to the target few-shot set.
    Adapt,
    /// Evaluate a run, or a single checkpoint on a labelled dataset.
    Eval {
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
    },
    /// Run the analytic checks of the rollout-variance theorem.
    Theorem,
    /// Compare adaptation variants against the full method.
    Ablate {
        /// Comma-separated variants; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// The full pipeline.
    Run,
}

enum Failure {
    Validation(String),
    Runtime(String),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(_) | Error::Parse { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let started = Instant::now();
    let result = configure_threads().and_then(|()| execute(&cli));
    match result {
        Ok(()) => {
            eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("runtime failure: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Acceptance(m)) => {
            eprintln!("acceptance check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Validation(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let mut assignments = Vec::new();
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Failure::Validation(format!("--set expects KEY=VALUE, got `{raw}`")))?;
        assignments.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg = cfg.with_overrides(&assignments)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(k) = cli.shots {
        cfg.adapt.k_shots = k;
    }
    if let Some(g) = cli.gamma {
        cfg.set_gamma(g);
    }
    if let Some(n) = cli.rollouts {
        cfg.adapt_grpo.group_size = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gen => {
            let mut p = Pipeline::open(&load_config(cli)?)?;
            p.run_until(Stage::Generate)?;
            table::print_generation(&p.generated_splits()?);
        }
        Command::TrainSource => {
            let mut p = Pipeline::open(&load_config(cli)?)?;
            p.run_until(Stage::EvalSource)?;
            table::print_reports(&[
                ("untrained on source", p.report(paths::UNTRAINED_SOURCE)?),
                ("source on source", p.report(paths::SOURCE_SOURCE)?),
                ("source-only on target", p.report(paths::SOURCE_TARGET)?),
            ]);
        }
        Command::Adapt => {
            let mut p = Pipeline::open(&load_config(cli)?)?;
            p.run_until(Stage::EvalAdapted)?;
            let s = p.adapt_summary()?;
            table::print_reports(&[
                ("source-only on target", p.report(paths::SOURCE_TARGET)?),
                ("adapted on target", p.report(paths::ADAPTED_TARGET)?),
            ]);
            println!(
                "pseudo labels: {} usable of {} shots, mean confidence {:.4}",
                s.n_usable, s.n_shots, s.mean_confidence
            );
        }
        Command::Eval { checkpoint, data } => match (checkpoint, data) {
            (Some(ckpt), Some(data)) => {
                let params = read_checkpoint(ckpt)?;
                let samples = envgen::read_dataset(data)?;
                let report = evaluate(&params, &samples, cli.seed.unwrap_or(0))?;
                table::print_reports(&[(&data.display().to_string(), report)]);
            }
            _ => {
                let mut p = Pipeline::open(&load_config(cli)?)?;
                p.run_until(Stage::EvalAdapted)?;
                table::print_reports(&table::run_reports(&p)?);
            }
        },
        Command::Theorem => {
            let cfg = load_config(cli)?;
            let suite = TheoremSuiteConfig {
                seed: cfg.seed,
                ..TheoremSuiteConfig::default()
            };
            let report = run_theorem_suite(&suite)?;
            let path = cfg.output_dir.join("theory/suite.json");
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            urpa_core::artifacts::write_atomic(&path, text.as_bytes())?;
            table::print_theorem(&report);
            if !report.passed {
                return Err(Failure::Acceptance(
                    "one or more theorem checks fell outside tolerance".into(),
                ));
            }
        }
        Command::Ablate { variants } => {
            let cfg = load_config(cli)?;
            let variants: Vec<AblationVariant> = match variants {
                Some(names) => names
                    .iter()
                    .filter(|n| !n.is_empty())
                    .map(|n| n.parse())
                    .collect::<Result<_, Error>>()?,
                None => AblationVariant::ALL.to_vec(),
            };
            let t = run_ablation(&cfg, &variants)?;
            table::print_ablation(&t);
        }
        Command::Run => {
            let mut p = Pipeline::open(&load_config(cli)?)?;
            let summary = p.run()?;
            table::print_reports(&table::run_reports(&p)?);
            table::print_summary(&summary);
        }
    }
    Ok(())
}
