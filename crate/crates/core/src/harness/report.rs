//! Results files: line-delimited trial records, metrics and a markdown
//! summary table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::Metrics;
use super::scenario::CaseType;
use super::trial::{FailureCategory, TrialRecord};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";

pub fn results_jsonl(records: &[TrialRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serialises") + "\n").collect()
}

fn rate(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

pub fn render_table(metrics: &Metrics, records: &[TrialRecord]) -> String {
    let mut out = String::new();
    out.push_str("## Success rates\n\n");
    out.push_str("| Mode | Solvable ESR | Solvable RSR | Unsolvable ESR | Unsolvable RSR |\n");
    out.push_str("|---|---|---|---|---|\n");
    for mode in metrics.modes() {
        let s = metrics.group(mode, CaseType::Solvable);
        let u = metrics.group(mode, CaseType::Unsolvable);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            mode.label(),
            rate(s.map(|g| g.esr)),
            rate(s.map(|g| g.rsr)),
            rate(u.map(|g| g.esr)),
            rate(u.map(|g| g.rsr)),
        );
    }
    let _ = writeln!(
        out,
        "\nTotal trials: {} (solvable {}, unsolvable {})\n",
        metrics.total_trials, metrics.solvable_trials, metrics.unsolvable_trials
    );
    out.push_str("## Planner calls per successful trial\n\n| Mode | Calls |\n|---|---|\n");
    for mode in metrics.modes() {
        let cell = match metrics.calls(mode, records) {
            Some((m, s)) => format!("{m:.2} ± {s:.2}"),
            None => "-".into(),
        };
        let _ = writeln!(out, "| {} | {} |", mode.label(), cell);
    }
    out.push_str("\n## Failure categories\n\n| Mode |");
    for c in FailureCategory::ALL {
        let _ = write!(out, " {} |", c.label());
    }
    out.push_str("\n|---|");
    for _ in FailureCategory::ALL {
        out.push_str("---|");
    }
    out.push('\n');
    for mode in metrics.modes() {
        let h = metrics.histogram(mode);
        let _ = write!(out, "| {} |", mode.label());
        for c in FailureCategory::ALL {
            let _ = write!(out, " {} |", h[&c]);
        }
        out.push('\n');
    }
    out
}

/// Writes the results, metrics and report files into `dir`.
pub fn emit_report(metrics: &Metrics, records: &[TrialRecord], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        (RESULTS_FILE, results_jsonl(records)),
        (METRICS_FILE, serde_json::to_string_pretty(metrics).expect("metrics serialise") + "\n"),
        (REPORT_FILE, render_table(metrics, records)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
