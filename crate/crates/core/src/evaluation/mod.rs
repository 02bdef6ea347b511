//! Utility and privacy metrics over completed runs, and report emission.

mod metrics;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::{RunArchive, Scheme, Timings, UserRunRecord};

pub use metrics::{
    distribution, hr10_category, hr10_exact, hr10_semantic, l1_distance, l2_distance, per_group_distances, privacy_leakage,
    recovery, CategoryDistribution, GroupDistance, Leakage, PerGroupDistances, SemanticHr, UserOutcome,
};
pub use report::{build_report, render_text, write_report, RecoveryRow, Report, REPORT_FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("distributions are over different category universes")]
    UniverseMismatch,
    #[error("{0} category group is empty")]
    EmptyGroup(&'static str),
    #[error("recovery is undefined when the obfuscation-only distance is 0")]
    UndefinedRecovery,
    #[error("no ground-truth-sensitive products; leakage is not applicable")]
    NotApplicable,
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// Mean score of the sensitive products that reached the server.
    pub leaked_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub scheme: Scheme,
    pub run_id: String,
    pub manifest_hash: String,
    pub users: usize,
    pub evaluated_users: usize,
    pub failed_users: usize,
    pub hr10_exact: f64,
    pub hr10_category: f64,
    pub hr10_semantic: f64,
    pub semantic_excluded: usize,
    /// Distances between pooled category distributions.
    pub l1: f64,
    pub l2: f64,
    /// Mean over users of per-user distribution distances.
    pub l1_user_mean: f64,
    pub l2_user_mean: f64,
    pub compared_users: usize,
    pub per_group: Option<PerGroupDistances>,
    pub pl_b: Option<f64>,
    pub pl_s: Option<f64>,
    pub leakage_items: usize,
    pub shortfall_total: usize,
    pub duplicate_recommendations: usize,
    pub sensitivity_scores: Option<ScoreStats>,
}

pub fn manifest_hash(run: &RunArchive) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(&run.manifest).expect("manifest serializes")))
}

fn ok_outcomes(records: &[UserRunRecord]) -> BTreeMap<&str, UserOutcome> {
    records.iter().filter(|r| r.is_ok()).map(|r| (r.user_id.as_str(), UserOutcome::from_record(r))).collect()
}

fn score_stats(run: &RunArchive) -> Option<ScoreStats> {
    let entries: Vec<_> = run.records.iter().flat_map(|r| &r.leakage).collect();
    let scores: Vec<f64> = entries.iter().filter_map(|e| e.score).collect();
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let leaked: Vec<f64> = entries.iter().filter(|e| e.shared).filter_map(|e| e.score).collect();
    let leaked_mean = (!leaked.is_empty()).then(|| leaked.iter().sum::<f64>() / leaked.len() as f64);
    Some(ScoreStats { count: scores.len(), mean, std, leaked_mean })
}

/// Metrics of `run` against `baseline`. Utility metrics use successful users;
/// distances use users successful in both runs; leakage pools every user.
pub fn evaluate_run(run: &RunArchive, baseline: &RunArchive) -> Result<MetricBundle, EvalError> {
    let universe = &run.manifest.category_universe;
    if universe != &baseline.manifest.category_universe {
        return Err(EvalError::UniverseMismatch);
    }
    let sys = ok_outcomes(&run.records);
    let base = ok_outcomes(&baseline.records);
    let users: Vec<UserOutcome> = sys.values().cloned().collect();
    let semantic = hr10_semantic(&users);

    let common: Vec<&str> = sys.keys().filter(|u| base.contains_key(*u)).copied().collect();
    let pooled = |m: &BTreeMap<&str, UserOutcome>| -> Vec<String> {
        common.iter().flat_map(|u| m[u].resolved_categories.iter().cloned()).collect()
    };
    let pooled_sys = distribution(&pooled(&sys), universe)?;
    let pooled_base = distribution(&pooled(&base), universe)?;
    let (mut l1_sum, mut l2_sum) = (0.0, 0.0);
    for u in &common {
        let a = distribution(&base[u].resolved_categories, universe)?;
        let b = distribution(&sys[u].resolved_categories, universe)?;
        l1_sum += l1_distance(&a, &b)?;
        l2_sum += l2_distance(&a, &b)?;
    }
    let per_user = |s: f64| if common.is_empty() { 0.0 } else { s / common.len() as f64 };
    let per_group = match per_group_distances(&pooled_base, &pooled_sys, &run.manifest.sensitive_categories) {
        Ok(g) => Some(g),
        Err(EvalError::EmptyGroup(_)) => None,
        Err(e) => return Err(e),
    };

    let leakage_entries: Vec<_> = run.records.iter().flat_map(|r| r.leakage.iter().cloned()).collect();
    let leakage = match privacy_leakage(&leakage_entries) {
        Ok(l) => Some(l),
        Err(EvalError::NotApplicable) => None,
        Err(e) => return Err(e),
    };

    let duplicate_recommendations = run
        .records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| r.resolved.len() - r.resolved.iter().map(|n| &n.product_id).collect::<BTreeSet<_>>().len())
        .sum();

    Ok(MetricBundle {
        scheme: run.manifest.scheme,
        run_id: run.manifest.run_id.clone(),
        manifest_hash: manifest_hash(run),
        users: run.records.len(),
        evaluated_users: users.len(),
        failed_users: run.records.len() - users.len(),
        hr10_exact: hr10_exact(&users),
        hr10_category: hr10_category(&users),
        hr10_semantic: semantic.value,
        semantic_excluded: semantic.excluded,
        l1: l1_distance(&pooled_base, &pooled_sys)?,
        l2: l2_distance(&pooled_base, &pooled_sys)?,
        l1_user_mean: per_user(l1_sum),
        l2_user_mean: per_user(l2_sum),
        compared_users: common.len(),
        per_group,
        pl_b: leakage.map(|l| l.pl_b),
        pl_s: leakage.and_then(|l| l.pl_s),
        leakage_items: leakage.map_or(0, |l| l.count),
        shortfall_total: run.records.iter().filter(|r| r.is_ok()).map(|r| r.shortfall).sum(),
        duplicate_recommendations,
        sensitivity_scores: score_stats(run),
    })
}

/// Mean per-user timings of a run, over successful users.
pub fn mean_timings(run: &RunArchive) -> Timings {
    let ok: Vec<&Timings> = run.records.iter().filter(|r| r.is_ok()).map(|r| &r.timings).collect();
    if ok.is_empty() {
        return Timings::default();
    }
    let n = ok.len() as f64;
    Timings {
        t_obf: ok.iter().map(|t| t.t_obf).sum::<f64>() / n,
        t_rec: ok.iter().map(|t| t.t_rec).sum::<f64>() / n,
        t_deobf: ok.iter().map(|t| t.t_deobf).sum::<f64>() / n,
        t_total_extra: ok.iter().map(|t| t.t_total_extra).sum::<f64>() / n,
    }
}
