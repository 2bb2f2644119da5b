//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test -p urpa-core --test acceptance -- 1 4`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use urpa_core::envgen::generate_domain;
use urpa_core::experiment::{
    paths, run_ablation, AblationTable, AblationVariant, ExperimentConfig, Pipeline, Stage,
    REPORTS_FILE,
};
use urpa_core::grpo::{compute_advantages, rollout_group, surrogate_objective};
use urpa_core::policy::{grad_logprob, logprob, PolicyParams, PolicySnapshot, Weights};
use urpa_core::rewards::source_reward;
use urpa_core::rng;
use urpa_core::theory::{run_theorem_suite, TheoremSuiteConfig};
use urpa_core::{relax, tiou, DomainSpec, InitConfig, RewardConfig, TimeInterval};

const BENCHMARK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Check = fn() -> (bool, String);
type BenchmarkCheck = fn(&Benchmark) -> (bool, String);

struct Outcome {
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = f();
    Outcome {
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

fn iv(a: f64, b: f64) -> TimeInterval {
    TimeInterval::new(a, b).unwrap()
}

// ---------------------------------------------------------------- 1

const ORACLE_BINS: usize = 10_000;

/// Overlap counted bin by bin on a grid of `ORACLE_BINS` cells; a cell
/// belongs to an interval when its centre does.
fn brute_force_tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..ORACLE_BINS {
        let in_a = a.0 <= i && i < a.1;
        let in_b = b.0 <= i && i < b.1;
        inter += usize::from(in_a && in_b);
        union += usize::from(in_a || in_b);
    }
    if union == 0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}

fn criterion_1() -> (bool, String) {
    let mut r = rng::stream(2024, &[1]);
    let n = 100_000;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let mut ends = || {
            let x = r.random_range(0..=ORACLE_BINS);
            let y = r.random_range(0..=ORACLE_BINS);
            (x.min(y), x.max(y))
        };
        let (a, b) = (ends(), ends());
        let to_iv = |(s, e): (usize, usize)| iv(s as f64 / ORACLE_BINS as f64, e as f64 / ORACLE_BINS as f64);
        let got = tiou(&to_iv(a), &to_iv(b));
        worst = worst.max((got - brute_force_tiou(a, b)).abs());
    }
    let examples = [
        (iv(0.3, 0.5), 0.1, (0.28, 0.52)),
        (iv(0.0, 1.0), 0.1, (0.0, 1.0)),
        (iv(0.5, 0.5), 0.1, (0.5, 0.5)),
    ];
    let relax_ok = examples.iter().all(|(gt, a, (s, e))| {
        let out = relax(gt, *a).unwrap();
        (out.start() - s).abs() < 1e-12 && (out.end() - e).abs() < 1e-12
    });
    let tiou_examples = (tiou(&iv(0.2, 0.6), &iv(0.4, 0.8)) - 1.0 / 3.0).abs() < 1e-12
        && tiou(&iv(0.1, 0.9), &iv(0.1, 0.9)) == 1.0
        && tiou(&iv(0.0, 0.1), &iv(0.5, 0.6)) == 0.0;
    (
        worst <= 2e-4 && relax_ok && tiou_examples,
        format!(
            "max |tiou - oracle| = {worst:.2e} over {n} pairs; relax examples {}; tiou examples {}",
            ok(relax_ok),
            ok(tiou_examples)
        ),
    )
}

// ---------------------------------------------------------------- 2

fn pop_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn criterion_2() -> (bool, String) {
    let mut r = rng::stream(2024, &[2]);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    let mut checked = 0;
    let mut constant_ok = true;
    for i in 0..10_000 {
        let rewards: Vec<f64> = match i % 4 {
            // continuous rewards
            0 | 1 => (0..8).map(|_| r.random::<f64>()).collect(),
            // format/accuracy mixtures typical of GRPO rewards
            2 => (0..8)
                .map(|_| 0.5 * f64::from(r.random_bool(0.7)) + 0.5 * r.random::<f64>())
                .collect(),
            _ => vec![r.random::<f64>(); 8],
        };
        let a = compute_advantages(&rewards, 1e-8);
        if rewards.iter().any(|&x| x != rewards[0]) {
            let (m, s) = pop_mean_std(&a);
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - 1.0).abs());
            checked += 1;
        } else {
            constant_ok &= a.iter().all(|&x| x == 0.0);
        }
    }
    (
        worst_mean <= 1e-9 && worst_std <= 1e-6 && constant_ok,
        format!(
            "{checked} varying groups: max |mean A| = {worst_mean:.1e}, max |std A - 1| = {worst_std:.1e}; constant groups all zero {}",
            ok(constant_ok)
        ),
    )
}

// ---------------------------------------------------------------- 3

fn jitter(p: &PolicyParams, scale: f64, seed: u64) -> PolicyParams {
    let mut r = rng::stream(seed, &[3, 3]);
    let n = Normal::new(0.0, scale).unwrap();
    let mut q = p.clone();
    for i in 0..q.weights.len() {
        q.weights.set(i, q.weights.get(i) + n.sample(&mut r));
    }
    q
}

/// Relative error of `grad` against central differences of `f`: over a
/// random subset of coordinates (max abs error over max abs gradient) and
/// along random full-dimensional directions.
fn fd_relative_error(
    p: &PolicyParams,
    grad: &Weights,
    f: impl Fn(&PolicyParams) -> f64,
    seed: u64,
) -> f64 {
    let h = 1e-5;
    let mut r = rng::stream(seed, &[3, 4]);
    let mut q = p.clone();
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for _ in 0..150 {
        let i = r.random_range(0..p.weights.len());
        let x = p.weights.get(i);
        q.weights.set(i, x + h);
        let up = f(&q);
        q.weights.set(i, x - h);
        let down = f(&q);
        q.weights.set(i, x);
        err = err.max(((up - down) / (2.0 * h) - grad.get(i)).abs());
        scale = scale.max(grad.get(i).abs());
    }
    let mut worst = err / scale.max(1e-12);
    let gnorm = grad.norm_sq().sqrt();
    for _ in 0..3 {
        let dir: Vec<f64> = (0..p.weights.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let dnorm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let along = |t: f64| {
            let mut m = p.clone();
            for (i, d) in dir.iter().enumerate() {
                m.weights.set(i, p.weights.get(i) + t * d / dnorm);
            }
            f(&m)
        };
        let fd = (along(h) - along(-h)) / (2.0 * h);
        let exact: f64 = dir.iter().enumerate().map(|(i, d)| grad.get(i) * d / dnorm).sum();
        worst = worst.max((fd - exact).abs() / gnorm.max(1e-12));
    }
    worst
}

fn criterion_3() -> (bool, String) {
    let spec = DomainSpec::default();
    let (samples, _) = generate_domain(&spec, 20, 33, true).unwrap();
    let reward_cfg = RewardConfig::default();
    let (mut worst_lp, mut worst_sur) = (0.0f64, 0.0f64);
    let mut configs = 0;
    for (c, sample) in samples.iter().enumerate() {
        let c = c as u64;
        let init = PolicyParams::initialize(spec.context_dim(), &InitConfig::default(), 100 + c).unwrap();
        let current = jitter(&init, 0.3, 200 + c);
        let old = jitter(&current, 0.05, 300 + c);
        let snapshot = PolicySnapshot {
            current: current.clone(),
            old,
            reference: init,
        };
        let ctx = sample.context();
        let gt = sample.gt_interval.unwrap();
        let group = rollout_group(&snapshot, sample, 8, 1e-8, (c, 0), |resp| {
            source_reward(&resp.rendered, &gt, &reward_cfg)
        })
        .unwrap();

        let tokens = &group.responses[0].tokens;
        let g = grad_logprob(&current, &ctx, tokens);
        worst_lp = worst_lp.max(fd_relative_error(&current, &g, |q| logprob(q, &ctx, tokens), c));

        let beta = [0.0, 0.04, 0.5, 1.0][c as usize % 4];
        let clip = c.is_multiple_of(3).then_some(0.2);
        let eval = surrogate_objective(&snapshot, &ctx, &group, beta, clip);
        let objective = |q: &PolicyParams| {
            let snap = PolicySnapshot {
                current: q.clone(),
                ..snapshot.clone()
            };
            surrogate_objective(&snap, &ctx, &group, beta, clip).objective
        };
        worst_sur = worst_sur.max(fd_relative_error(&current, &eval.gradient, objective, 1000 + c));
        configs += 1;
    }
    (
        worst_lp < 1e-4 && worst_sur < 1e-4,
        format!(
            "{configs} configurations: max relative error {worst_lp:.1e} (log-prob), {worst_sur:.1e} (surrogate)"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> (bool, String) {
    let report = run_theorem_suite(&TheoremSuiteConfig::default()).unwrap();
    let passed = report.gaussian_rel_error < 0.02
        && (report.convergence_exponent + 0.5).abs() <= 0.1
        && report.pinsker_pairs == 100
        && report.pinsker_violations == 0
        && report.variance_gap_pairs == 200
        && report.variance_gap_violations == 0;
    (
        passed,
        format!(
            "sigma_hat rel. error {:.4}; convergence exponent {:+.3}; Pinsker {}/{} violations; variance gap {}/{} violations",
            report.gaussian_rel_error,
            report.convergence_exponent,
            report.pinsker_violations,
            report.pinsker_pairs,
            report.variance_gap_violations,
            report.variance_gap_pairs
        ),
    )
}

// ---------------------------------------------------------------- 5 to 8

struct SeedRun {
    untrained: f64,
    source: f64,
    source_steps: usize,
    table: AblationTable,
}

struct Benchmark {
    runs: Vec<SeedRun>,
    source_time: Duration,
    adapt_time: Duration,
}

fn benchmark(root: &Path) -> Benchmark {
    let mut source_time = Duration::ZERO;
    let mut adapt_time = Duration::ZERO;
    let mut runs = Vec::new();
    for seed in BENCHMARK_SEEDS {
        let cfg = ExperimentConfig {
            seed,
            output_dir: root.join(format!("seed{seed}")),
            ..ExperimentConfig::default()
        };
        let mut pipeline = Pipeline::open(&cfg).unwrap();
        pipeline.run_until(Stage::Generate).unwrap();
        let t = Instant::now();
        pipeline.run_until(Stage::TrainSource).unwrap();
        source_time += t.elapsed();
        pipeline.run_until(Stage::EvalSource).unwrap();
        let t = Instant::now();
        pipeline.run_until(Stage::EvalAdapted).unwrap();
        adapt_time += t.elapsed();
        let log = fs::read_to_string(cfg.output_dir.join(paths::SOURCE_LOG)).unwrap();
        let table = run_ablation(
            &cfg,
            &[
                AblationVariant::NoConfidence,
                AblationVariant::NoRelaxation,
                AblationVariant::GammaSweep,
                AblationVariant::KSweep,
            ],
        )
        .unwrap();
        runs.push(SeedRun {
            untrained: pipeline.report(paths::UNTRAINED_SOURCE).unwrap().miou,
            source: pipeline.report(paths::SOURCE_SOURCE).unwrap().miou,
            source_steps: log.lines().count(),
            table,
        });
    }
    Benchmark {
        runs,
        source_time,
        adapt_time,
    }
}

fn row_miou(run: &SeedRun, label: &str) -> f64 {
    run.table
        .row(label)
        .unwrap_or_else(|| panic!("missing row {label}"))
        .report
        .miou
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn list(xs: impl Iterator<Item = f64>) -> String {
    xs.map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn criterion_5(b: &Benchmark) -> (bool, String) {
    let runs = &b.runs;
    let lifted = runs
        .iter()
        .filter(|r| r.untrained < 0.1 && r.source > 0.6 && r.source_steps <= 2000)
        .count();
    let fast = b.source_time < Duration::from_secs(300);
    (
        lifted == runs.len() && fast,
        format!(
            "{lifted}/{} seeds lifted; untrained mIoU [{}] -> trained [{}]; steps [{}]; training took {:.0}s",
            runs.len(),
            list(runs.iter().map(|r| r.untrained)),
            list(runs.iter().map(|r| r.source)),
            runs.iter().map(|r| r.source_steps.to_string()).collect::<Vec<_>>().join(" "),
            b.source_time.as_secs_f64()
        ),
    )
}

fn criterion_6(b: &Benchmark) -> (bool, String) {
    let runs = &b.runs;
    let improved = runs
        .iter()
        .filter(|r| r.table.base.report.miou > r.table.source_only.miou)
        .count();
    let k200 = mean(runs.iter().map(|r| row_miou(r, "K=200")));
    let k100 = mean(runs.iter().map(|r| row_miou(r, "K=100")));
    let fast = b.adapt_time < Duration::from_secs(300);
    (
        improved >= 4 && k200 >= k100 && fast,
        format!(
            "adapted beats source-only on {improved}/{} seeds (source-only [{}], adapted [{}]); mean mIoU K=200 {k200:.4} vs K=100 {k100:.4}; adaptation took {:.0}s",
            runs.len(),
            list(runs.iter().map(|r| r.table.source_only.miou)),
            list(runs.iter().map(|r| r.table.base.report.miou)),
            b.adapt_time.as_secs_f64()
        ),
    )
}

fn criterion_7(b: &Benchmark) -> (bool, String) {
    let full = mean(b.runs.iter().map(|r| r.table.base.report.miou));
    let no_conf = mean(b.runs.iter().map(|r| row_miou(r, "no_confidence")));
    let neither = mean(b.runs.iter().map(|r| row_miou(r, "no_relaxation")));
    (
        full >= no_conf && no_conf >= neither,
        format!(
            "mean mIoU: full {full:.4}, no confidence {no_conf:.4}, no relaxation or confidence {neither:.4}"
        ),
    )
}

fn criterion_8(b: &Benchmark) -> (bool, String) {
    let mut by_gamma: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &b.runs {
        for row in r.table.rows.iter().filter(|row| row.label.starts_with("gamma=")) {
            by_gamma.entry(row.label.clone()).or_default().push(row.report.miou);
        }
    }
    let means: Vec<(String, f64)> = by_gamma
        .into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let max = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let spread = max - min;
    (
        means.len() == 4 && spread < 0.05,
        format!(
            "mean mIoU {}; spread {spread:.4}",
            means
                .iter()
                .map(|(k, v)| format!("{k}: {v:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_source_train: 3_200,
        n_target_pool: 400,
        eval_set_size: 200,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.probe.n_samples = 20;
    cfg
}

fn run_with_threads(cfg: &ExperimentConfig, threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| urpa_core::experiment::run_experiment(cfg)).unwrap();
    fs::read(cfg.output_dir.join(REPORTS_FILE)).unwrap()
}

fn criterion_9(root: &Path) -> (bool, String) {
    let a = small_config(&root.join("a"));
    let b = ExperimentConfig {
        output_dir: root.join("b"),
        ..a.clone()
    };
    let c = ExperimentConfig {
        output_dir: root.join("c"),
        ..a.clone()
    };
    let first = run_with_threads(&a, 8);
    let second = run_with_threads(&b, 8);
    let single = run_with_threads(&c, 1);
    let artifacts = [paths::ADAPTED_TARGET, paths::SOURCE_CKPT, paths::ADAPT_CKPT, paths::PROBES];
    let same_artifacts = artifacts.iter().all(|rel| {
        let x = fs::read(a.output_dir.join(rel)).unwrap();
        x == fs::read(b.output_dir.join(rel)).unwrap() && x == fs::read(c.output_dir.join(rel)).unwrap()
    });
    let repeat = first == second;
    let threads = first == single;
    (
        repeat && threads && same_artifacts,
        format!(
            "repeat run reports byte-identical {}; 1 vs 8 threads identical {}; checkpoints and probes identical {}",
            ok(repeat),
            ok(threads),
            ok(same_artifacts)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "NO"
    }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let selected = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();

    let simple: [(u32, &str, Check); 4] = [
        (1, "interval math matches the brute-force oracle", criterion_1),
        (2, "advantages are standardized per group", criterion_2),
        (3, "analytic gradients match finite differences", criterion_3),
        (4, "rollout-variance theorem checks", criterion_4),
    ];
    let limits = [10u64, 5, 30, 120];
    for ((n, name, f), limit) in simple.into_iter().zip(limits) {
        if selected(n) {
            let mut o = timed(f);
            if o.elapsed > Duration::from_secs(limit) {
                o.passed = false;
                o.detail += &format!("; exceeded {limit}s");
            }
            results.push((n, name, o));
            report(results.last().unwrap());
        }
    }

    if (5..=8).any(selected) {
        let bench = benchmark(&tmp.path().join("benchmark"));
        let staged: [(u32, &str, BenchmarkCheck); 4] = [
            (5, "source training lifts mIoU above 0.6", criterion_5),
            (6, "few-shot adaptation improves the target", criterion_6),
            (7, "ablation ordering", criterion_7),
            (8, "robustness to gamma", criterion_8),
        ];
        for (n, name, f) in staged {
            if selected(n) {
                results.push((n, name, timed(|| f(&bench))));
                report(results.last().unwrap());
            }
        }
    }

    if selected(9) {
        results.push((9, "determinism across runs and thread counts", timed(|| criterion_9(&tmp.path().join("determinism")))));
        report(results.last().unwrap());
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("\nacceptance summary:");
    for (n, name, o) in &results {
        println!("  [{}] {n}. {name}", if o.passed { "PASS" } else { "FAIL" });
    }
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("{} of {} criteria failed: {failed:?}", failed.len(), results.len());
        ExitCode::FAILURE
    }
}

fn report((n, name, o): &(u32, &str, Outcome)) {
    println!(
        "[{}] criterion {n}: {name} ({:.1}s): {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.elapsed.as_secs_f64(),
        o.detail
    );
}
