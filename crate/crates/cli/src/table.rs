//! Human-readable tables, each followed by the same rows as JSON lines.

use serde::Serialize;
use urpa_core::experiment::{
    paths, AblationRow, AblationTable, EvalReport, GeneratedSplit, Pipeline, RunSummary,
};
use urpa_core::theory::TheoremReport;
use urpa_core::Error;

#[derive(Serialize)]
struct Record<'a, T: Serialize> {
    name: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn emit<T: Serialize>(name: &str, body: &T) {
    match serde_json::to_string(&Record { name, body }) {
        Ok(line) => println!("{line}"),
        Err(e) => eprintln!("could not serialize {name}: {e}"),
    }
}

pub fn run_reports(p: &Pipeline) -> Result<Vec<(&'static str, EvalReport)>, Error> {
    Ok(vec![
        ("untrained on source", p.report(paths::UNTRAINED_SOURCE)?),
        ("source on source", p.report(paths::SOURCE_SOURCE)?),
        ("source-only on target", p.report(paths::SOURCE_TARGET)?),
        ("adapted on target", p.report(paths::ADAPTED_TARGET)?),
    ])
}

fn report_row(name: &str, r: &EvalReport) -> String {
    format!(
        "{name:<26} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.3} {:>6}",
        r.recall(0.3),
        r.recall(0.5),
        r.recall(0.7),
        r.miou,
        r.format_rate,
        r.n_eval
    )
}

const REPORT_HEADER: &str = "                            R@0.3   R@0.5   R@0.7    mIoU  format      n";

pub fn print_reports<S: AsRef<str>>(rows: &[(S, EvalReport)]) {
    println!("{REPORT_HEADER}");
    for (name, r) in rows {
        println!("{}", report_row(name.as_ref(), r));
    }
    for (name, r) in rows {
        emit(name.as_ref(), r);
    }
}

pub fn print_summary(s: &RunSummary) {
    println!(
        "adaptation: {} usable pseudo labels of {} shots, mean confidence {:.4}",
        s.adapt.n_usable, s.adapt.n_shots, s.adapt.mean_confidence
    );
    let changes: Vec<String> = s
        .stabilization
        .g_values
        .windows(2)
        .zip(&s.stabilization.median_abs_change)
        .map(|(w, d)| format!("{}->{}: {d:.4}", w[0], w[1]))
        .collect();
    println!("rollout std, median change: {}", changes.join(", "));
    if !s.reused.is_empty() {
        let names: Vec<&str> = s.reused.iter().map(|st| st.name()).collect();
        println!("reused stages: {}", names.join(", "));
    }
    println!("artifacts: {}", s.dir.display());
}

pub fn print_generation(splits: &[GeneratedSplit]) {
    println!("{:<14} {:>7} {:>14} {:>10}", "split", "n", "mean duration", "mean SNR");
    for s in splits {
        println!(
            "{:<14} {:>7} {:>14.4} {:>10.3}",
            s.name, s.report.n_generated, s.report.mean_event_duration, s.report.mean_profile_snr
        );
    }
    for s in splits {
        emit(&s.name, s);
    }
}

fn ablation_row(r: &AblationRow) -> String {
    format!(
        "{:<16} {:>7.4} {:>+8.4} {:>7.4} {:>7.4} {:>7.4}",
        r.label,
        r.report.miou,
        r.delta_miou,
        r.report.recall(0.3),
        r.report.recall(0.5),
        r.report.recall(0.7)
    )
}

pub fn print_ablation(t: &AblationTable) {
    println!("{:<16} {:>7} {:>8} {:>7} {:>7} {:>7}", "variant", "mIoU", "delta", "R@0.3", "R@0.5", "R@0.7");
    println!(
        "{:<16} {:>7.4} {:>+8.4}",
        "source-only",
        t.source_only.miou,
        t.source_only.miou - t.base.report.miou
    );
    println!("{}", ablation_row(&t.base));
    for r in &t.rows {
        println!("{}", ablation_row(r));
    }
    if let Some(spread) = t.gamma_spread {
        println!("gamma sweep mIoU spread: {spread:.4}");
    }
    emit("source-only", &t.source_only);
    emit(&t.base.label, &t.base);
    for r in &t.rows {
        emit(&r.label, r);
    }
}

pub fn print_theorem(r: &TheoremReport) {
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    println!(
        "consistency      sigma_hat {:.6} (rel. error {:.4})  {}",
        r.gaussian_sigma_hat,
        r.gaussian_rel_error,
        mark(r.gaussian_rel_error < 0.02)
    );
    println!(
        "convergence      exponent {:+.4}, medians {:?}  {}",
        r.convergence_exponent,
        r.convergence_medians
            .iter()
            .map(|m| format!("{m:.2e}"))
            .collect::<Vec<_>>(),
        mark((r.convergence_exponent + 0.5).abs() <= 0.1)
    );
    println!(
        "pinsker          {} violations of {}  {}",
        r.pinsker_violations,
        r.pinsker_pairs,
        mark(r.pinsker_violations == 0)
    );
    println!(
        "variance gap     {} violations of {}  {}",
        r.variance_gap_violations,
        r.variance_gap_pairs,
        mark(r.variance_gap_violations == 0)
    );
    #[derive(Serialize)]
    struct Summary {
        gaussian_sigma_hat: f64,
        gaussian_rel_error: f64,
        convergence_exponent: f64,
        pinsker_violations: usize,
        variance_gap_violations: usize,
        passed: bool,
    }
    emit(
        "theorem",
        &Summary {
            gaussian_sigma_hat: r.gaussian_sigma_hat,
            gaussian_rel_error: r.gaussian_rel_error,
            convergence_exponent: r.convergence_exponent,
            pinsker_violations: r.pinsker_violations,
            variance_gap_violations: r.variance_gap_violations,
            passed: r.passed,
        },
    );
}
