//! Plain-text summary of a report.

use std::fmt::Write;

use collapse_core::io::Report;
use collapse_core::stats::{CheckKind, CheckResult};

fn relation(kind: CheckKind) -> &'static str {
    match kind {
        CheckKind::Equality => "=",
        CheckKind::UpperBound => "<=",
        CheckKind::LowerBound => ">=",
        CheckKind::NotApplicable => "n/a",
    }
}

fn rows(check: &CheckResult, prefix: &str, out: &mut Vec<[String; 5]>) {
    let name = if prefix.is_empty() {
        check.name.clone()
    } else {
        format!("{prefix}/{}", check.name)
    };
    if check.children.is_empty() {
        let status = match (check.kind, check.passed) {
            (CheckKind::NotApplicable, _) => "SKIP",
            (_, true) => "PASS",
            (_, false) => "FAIL",
        };
        out.push([
            status.into(),
            name,
            format!("{:.6e}", check.statistic),
            format!("{} {:.6e}", relation(check.kind), check.target),
            format!("{:.3e}", check.tolerance),
        ]);
    } else {
        for c in &check.children {
            rows(c, &name, out);
        }
    }
}

pub fn render(report: &Report) -> String {
    let mut table = vec![[
        "".to_string(),
        "check".to_string(),
        "statistic".to_string(),
        "target".to_string(),
        "tolerance".to_string(),
    ]];
    for c in &report.checks {
        rows(c, "", &mut table);
    }
    let mut widths = [0usize; 5];
    for r in &table {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut s = String::new();
    writeln!(
        s,
        "{} on {} (seed {})",
        report.manifest.command, report.manifest.fixture, report.manifest.seed
    )
    .unwrap();
    if table.len() > 1 {
        for r in &table {
            let line: Vec<String> = r
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            writeln!(s, "{}", line.join("  ").trim_end()).unwrap();
        }
        let failed = table.iter().skip(1).filter(|r| r[0] == "FAIL").count();
        writeln!(s, "{} checks, {failed} failed", table.len() - 1).unwrap();
    }
    if !report.summary.is_null() {
        writeln!(
            s,
            "{}",
            serde_json::to_string_pretty(&report.summary).unwrap()
        )
        .unwrap();
    }
    s
}
