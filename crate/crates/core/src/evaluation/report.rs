use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate_run, mean_timings, recovery, EvalError, MetricBundle};
use crate::pipeline::{RunArchive, Scheme, Timings};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub scheme: Scheme,
    pub obf_only_run_id: String,
    pub run_id: String,
    pub l1_pct: Option<f64>,
    pub l2_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub baseline_run_id: String,
    pub bundles: Vec<MetricBundle>,
    pub recovery: Vec<RecoveryRow>,
}

/// Evaluates every run against the named baseline. Bundles follow the
/// fixed scheme order, then run id.
pub fn build_report(runs: &[RunArchive], baseline_run_id: &str) -> Result<Report, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Invalid("no runs to report".into()));
    }
    let baseline = runs
        .iter()
        .find(|r| r.manifest.run_id == baseline_run_id)
        .ok_or_else(|| EvalError::Invalid(format!("baseline run {baseline_run_id:?} not among the runs")))?;
    let mut bundles = runs.iter().map(|r| evaluate_run(r, baseline)).collect::<Result<Vec<_>, _>>()?;
    bundles.sort_by(|a, b| (a.scheme, &a.run_id).cmp(&(b.scheme, &b.run_id)));
    let mut rows = Vec::new();
    for b in &bundles {
        let Some(counterpart) = b.scheme.obf_only_counterpart() else { continue };
        let Some(only) = bundles.iter().find(|o| o.scheme == counterpart) else { continue };
        rows.push(RecoveryRow {
            scheme: b.scheme,
            obf_only_run_id: only.run_id.clone(),
            run_id: b.run_id.clone(),
            l1_pct: recovery(only.l1, b.l1).ok(),
            l2_pct: recovery(only.l2, b.l2).ok(),
        });
    }
    Ok(Report { format_version: REPORT_FORMAT_VERSION, baseline_run_id: baseline_run_id.to_string(), bundles, recovery: rows })
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}%", 100.0 * v))
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), num)
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = vec![line(header.to_vec())];
    out.push(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        out.push(line(r.iter().map(String::as_str).collect()));
    }
    out.join("\n") + "\n"
}

pub fn render_text(report: &Report) -> String {
    let main: Vec<Vec<String>> = report
        .bundles
        .iter()
        .map(|b| {
            vec![
                b.scheme.label().to_string(),
                num(b.hr10_category),
                num(b.hr10_semantic),
                num(b.l2),
                num(b.l1),
                pct(b.pl_b),
                pct(b.pl_s),
            ]
        })
        .collect();
    let groups: Vec<Vec<String>> = report
        .bundles
        .iter()
        .map(|b| {
            let g = b.per_group;
            vec![
                b.scheme.label().to_string(),
                opt_num(g.map(|g| g.nonsensitive.avg_l2)),
                opt_num(g.map(|g| g.nonsensitive.avg_l1)),
                opt_num(g.map(|g| g.sensitive.avg_l2)),
                opt_num(g.map(|g| g.sensitive.avg_l1)),
            ]
        })
        .collect();
    let recovery: Vec<Vec<String>> = report
        .recovery
        .iter()
        .map(|r| {
            let p = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}%"));
            vec![r.scheme.label().to_string(), p(r.l2_pct), p(r.l1_pct)]
        })
        .collect();
    let extra: Vec<Vec<String>> = report
        .bundles
        .iter()
        .map(|b| {
            vec![
                b.scheme.label().to_string(),
                b.run_id.clone(),
                format!("{}/{}", b.evaluated_users, b.users),
                num(b.hr10_exact),
                num(b.l2_user_mean),
                num(b.l1_user_mean),
                b.shortfall_total.to_string(),
                b.duplicate_recommendations.to_string(),
            ]
        })
        .collect();
    let mut out = format!("Baseline run: {}\n\n", report.baseline_run_id);
    out += &table(
        &["Scheme", "HR@10 Categorical", "HR@10 Semantic", "L2 Distance", "L1 Distance", "PL_b (%)", "PL_s (%)"],
        &main,
    );
    out += "\nPer-group distances (pooled)\n";
    out += &table(&["Scheme", "Nonsensitive Avg L2", "Nonsensitive Avg L1", "Sensitive Avg L2", "Sensitive Avg L1"], &groups);
    if !recovery.is_empty() {
        out += "\nRecovery by deobfuscation\n";
        out += &table(&["Scheme", "L2 Recovery", "L1 Recovery"], &recovery);
    }
    out += "\nSupplementary\n";
    out += &table(
        &["Scheme", "Run", "Users ok", "HR@10 Exact", "L2 (user mean)", "L1 (user mean)", "Shortfall", "Duplicates"],
        &extra,
    );
    let stats: Vec<String> = report
        .bundles
        .iter()
        .filter_map(|b| {
            b.sensitivity_scores.map(|s| {
                format!(
                    "{}: sensitivity scores n={} mean={} std={} leaked mean={}",
                    b.scheme.label(),
                    s.count,
                    num(s.mean),
                    num(s.std),
                    opt_num(s.leaked_mean)
                )
            })
        })
        .collect();
    if !stats.is_empty() {
        out += "\n";
        out += &stats.join("\n");
        out += "\n";
    }
    out
}

#[derive(Serialize)]
struct TimingRow<'a> {
    run_id: &'a str,
    scheme: Scheme,
    mean: Timings,
}

/// Writes `report.json` and `report.txt`, plus `timings.json`, which holds
/// wall-clock measurements and therefore differs between otherwise identical runs.
pub fn write_report(dir: &Path, report: &Report, runs: &[RunArchive]) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report).map_err(|e| EvalError::Invalid(e.to_string()))?;
    json.push('\n');
    fs::write(&json_path, json)?;
    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, render_text(report))?;
    let timings: Vec<TimingRow> = runs
        .iter()
        .map(|r| TimingRow { run_id: &r.manifest.run_id, scheme: r.manifest.scheme, mean: mean_timings(r) })
        .collect();
    let timings_path = dir.join("timings.json");
    fs::write(&timings_path, serde_json::to_string_pretty(&timings).map_err(|e| EvalError::Invalid(e.to_string()))? + "\n")?;
    Ok(vec![json_path, txt_path, timings_path])
}
