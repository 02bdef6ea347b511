use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::pipeline::{LeakageEntry, UserRunRecord, TOP_K};

/// The top-k slice of one user's resolved recommendations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user_id: String,
    pub target_id: String,
    pub target_category: String,
    pub resolved_ids: Vec<String>,
    pub resolved_categories: Vec<String>,
    pub target_similarity: Vec<Option<f64>>,
}

impl UserOutcome {
    pub fn from_record(r: &UserRunRecord) -> Self {
        let top = r.resolved.iter().take(TOP_K);
        Self {
            user_id: r.user_id.clone(),
            target_id: r.target_id.clone(),
            target_category: r.target_category.clone(),
            resolved_ids: top.clone().map(|n| n.product_id.clone()).collect(),
            resolved_categories: top.map(|n| n.category.clone()).collect(),
            target_similarity: r.target_similarity.iter().take(TOP_K).copied().collect(),
        }
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Share of users whose target product is among their first ten recommendations.
pub fn hr10_exact(users: &[UserOutcome]) -> f64 {
    fraction(users.iter().filter(|u| u.resolved_ids.iter().take(TOP_K).any(|id| *id == u.target_id)).count(), users.len())
}

/// Share of users with one of their first ten recommendations in the target's main category.
pub fn hr10_category(users: &[UserOutcome]) -> f64 {
    fraction(users.iter().filter(|u| u.resolved_categories.iter().take(TOP_K).any(|c| *c == u.target_category)).count(), users.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticHr {
    pub value: f64,
    /// Recommendations skipped because their similarity was undefined.
    pub excluded: usize,
}

/// Mean over users of the best target similarity. A user without any
/// defined similarity scores 0.
pub fn hr10_semantic(users: &[UserOutcome]) -> SemanticHr {
    let mut excluded = 0;
    let mut sum = 0.0;
    for u in users {
        let top = &u.target_similarity[..u.target_similarity.len().min(TOP_K)];
        excluded += top.iter().filter(|s| s.is_none()).count();
        sum += top.iter().flatten().copied().fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s)))).unwrap_or(0.0);
    }
    SemanticHr { value: if users.is_empty() { 0.0 } else { sum / users.len() as f64 }, excluded }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub categories: Vec<String>,
    pub proportions: Vec<f64>,
    /// Set when built from no recommendations; proportions are then all zero.
    pub empty: bool,
}

pub fn distribution<S: AsRef<str>>(resolved_categories: &[S], universe: &[String]) -> Result<CategoryDistribution, EvalError> {
    if universe.is_empty() {
        return Err(EvalError::Invalid("category universe is empty".into()));
    }
    let mut counts = vec![0usize; universe.len()];
    for c in resolved_categories {
        let i = universe
            .iter()
            .position(|u| u == c.as_ref())
            .ok_or_else(|| EvalError::Invalid(format!("category {:?} outside the universe", c.as_ref())))?;
        counts[i] += 1;
    }
    let n = resolved_categories.len();
    Ok(CategoryDistribution {
        categories: universe.to_vec(),
        proportions: counts.iter().map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 }).collect(),
        empty: n == 0,
    })
}

fn deltas<'a>(a: &'a CategoryDistribution, b: &'a CategoryDistribution) -> Result<impl Iterator<Item = f64> + 'a, EvalError> {
    if a.categories != b.categories {
        return Err(EvalError::UniverseMismatch);
    }
    Ok(a.proportions.iter().zip(&b.proportions).map(|(x, y)| x - y))
}

pub fn l1_distance(base: &CategoryDistribution, sys: &CategoryDistribution) -> Result<f64, EvalError> {
    Ok(deltas(base, sys)?.map(f64::abs).sum())
}

pub fn l2_distance(base: &CategoryDistribution, sys: &CategoryDistribution) -> Result<f64, EvalError> {
    Ok(deltas(base, sys)?.map(|d| d * d).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDistance {
    pub avg_l1: f64,
    pub avg_l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerGroupDistances {
    pub sensitive: GroupDistance,
    pub nonsensitive: GroupDistance,
}

/// Per-category averages of |Δ| and root-mean Δ² within each group.
pub fn per_group_distances(
    base: &CategoryDistribution,
    sys: &CategoryDistribution,
    sensitive_categories: &[String],
) -> Result<PerGroupDistances, EvalError> {
    let d: Vec<f64> = deltas(base, sys)?.collect();
    let sensitive: BTreeSet<&str> = sensitive_categories.iter().map(String::as_str).collect();
    let group = |want_sensitive: bool| -> Result<GroupDistance, EvalError> {
        let members: Vec<f64> = base
            .categories
            .iter()
            .zip(&d)
            .filter(|(c, _)| sensitive.contains(c.as_str()) == want_sensitive)
            .map(|(_, &x)| x)
            .collect();
        if members.is_empty() {
            return Err(EvalError::EmptyGroup(if want_sensitive { "sensitive" } else { "nonsensitive" }));
        }
        let k = members.len() as f64;
        Ok(GroupDistance {
            avg_l1: members.iter().map(|x| x.abs()).sum::<f64>() / k,
            avg_l2: (members.iter().map(|x| x * x).sum::<f64>() / k).sqrt(),
        })
    };
    Ok(PerGroupDistances { sensitive: group(true)?, nonsensitive: group(false)? })
}

/// Percentage of the obfuscation-only distance removed by deobfuscation.
pub fn recovery(d_obf_only: f64, d_obf_deobf: f64) -> Result<f64, EvalError> {
    if d_obf_only == 0.0 {
        return Err(EvalError::UndefinedRecovery);
    }
    Ok(100.0 * (d_obf_only - d_obf_deobf) / d_obf_only)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leakage {
    pub pl_b: f64,
    /// Absent unless every entry carries a score and the scores sum above 0.
    pub pl_s: Option<f64>,
    /// Ground-truth-sensitive products considered.
    pub count: usize,
}

pub fn privacy_leakage(entries: &[LeakageEntry]) -> Result<Leakage, EvalError> {
    if entries.is_empty() {
        return Err(EvalError::NotApplicable);
    }
    let shared = entries.iter().filter(|e| e.shared).count();
    let pl_s = entries.iter().map(|e| e.score).collect::<Option<Vec<f64>>>().and_then(|scores| {
        let total: f64 = scores.iter().sum();
        (total > 0.0).then(|| entries.iter().zip(&scores).filter(|(e, _)| e.shared).map(|(_, s)| s).sum::<f64>() / total)
    });
    Ok(Leakage { pl_b: shared as f64 / entries.len() as f64, pl_s, count: entries.len() })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn user(target: &str, cat: &str, ids: &[&str], cats: &[&str], sims: &[Option<f64>]) -> UserOutcome {
        UserOutcome {
            user_id: target.into(),
            target_id: target.into(),
            target_category: cat.into(),
            resolved_ids: ids.iter().map(|s| s.to_string()).collect(),
            resolved_categories: cats.iter().map(|s| s.to_string()).collect(),
            target_similarity: sims.to_vec(),
        }
    }

    fn universe(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn dist(p: &[f64], u: &[&str]) -> CategoryDistribution {
        CategoryDistribution { categories: universe(u), proportions: p.to_vec(), empty: false }
    }

    #[test]
    fn hit_rates() {
        let hit = user("t", "Books", &["x", "t"], &["A", "Books"], &[]);
        let miss = user("t", "Books", &["x"], &["A"], &[]);
        assert_eq!(hr10_exact(&[hit.clone(), hit.clone()]), 1.0);
        assert_eq!(hr10_exact(std::slice::from_ref(&miss)), 0.0);
        let mut eight = vec![hit.clone(); 3];
        eight.extend(vec![miss.clone(); 5]);
        assert_eq!(hr10_exact(&eight), 0.375);
        assert_eq!(hr10_category(&[hit]), 1.0);
        assert_eq!(hr10_category(&[user("t", "Books", &[], &[], &[])]), 0.0);
    }

    #[test]
    fn semantic() {
        let a = user("a", "", &[], &[], &[Some(0.2), Some(1.0)]);
        let b = user("b", "", &[], &[], &[Some(0.5), None]);
        let s = hr10_semantic(&[a, b]);
        assert_abs_diff_eq!(s.value, 0.75, epsilon = 1e-15);
        assert_eq!(s.excluded, 1);
        assert_eq!(hr10_semantic(&[user("c", "", &[], &[], &[Some(0.0)])]).value, 0.0);
    }

    #[test]
    fn distributions() {
        let u = universe(&["A", "B", "C"]);
        let d = distribution(&["A", "A", "B", "C", "A", "B", "A", "B", "C", "A"], &u).unwrap();
        assert_eq!(d.proportions, [0.5, 0.3, 0.2]);
        let d = distribution(&["B"; 4], &u).unwrap();
        assert_eq!(d.proportions, [0.0, 1.0, 0.0]);
        let d = distribution::<&str>(&[], &u).unwrap();
        assert!(d.empty && d.proportions.iter().all(|&x| x == 0.0));
        assert!(distribution(&["Z"], &u).is_err());
        let d = distribution(&["A", "B"], &universe(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(d.proportions, [0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn distances() {
        let u = ["A", "B"];
        let a = dist(&[0.5, 0.5], &u);
        assert_eq!((l1_distance(&a, &a).unwrap(), l2_distance(&a, &a).unwrap()), (0.0, 0.0));
        let b = dist(&[1.0, 0.0], &u);
        assert_abs_diff_eq!(l1_distance(&a, &b).unwrap(), 1.0);
        assert_abs_diff_eq!(l2_distance(&a, &b).unwrap(), 0.7071, epsilon = 1e-4);
        let c = dist(&[0.0, 1.0], &u);
        assert_abs_diff_eq!(l1_distance(&b, &c).unwrap(), 2.0);
        assert_abs_diff_eq!(l2_distance(&b, &c).unwrap(), 1.4142, epsilon = 1e-4);
        assert!(matches!(l1_distance(&a, &dist(&[1.0], &["A"])), Err(EvalError::UniverseMismatch)));
    }

    #[test]
    fn per_group() {
        let u = ["S1", "S2", "N"];
        let sens = universe(&["S1", "S2"]);
        let base = dist(&[0.4, 0.3, 0.3], &u);
        let g = per_group_distances(&base, &base, &sens).unwrap();
        assert_eq!(g.sensitive, GroupDistance { avg_l1: 0.0, avg_l2: 0.0 });
        let sys = dist(&[0.3, 0.6, 0.1], &u);
        let g = per_group_distances(&base, &sys, &sens).unwrap();
        assert_abs_diff_eq!(g.sensitive.avg_l1, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.sensitive.avg_l2, 0.2236, epsilon = 1e-4);
        assert_abs_diff_eq!(g.nonsensitive.avg_l1, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(g.nonsensitive.avg_l2, 0.2, epsilon = 1e-12);
        assert!(matches!(per_group_distances(&base, &sys, &universe(&["S1", "S2", "N"])), Err(EvalError::EmptyGroup(_))));
    }

    #[test]
    fn recovery_values() {
        assert_abs_diff_eq!(recovery(0.4860, 0.2847).unwrap(), 41.42, epsilon = 0.01);
        assert_abs_diff_eq!(recovery(0.8462, 0.4773).unwrap(), 43.59, epsilon = 0.01);
        assert_eq!(recovery(0.3, 0.3).unwrap(), 0.0);
        assert!(recovery(0.0, 0.1).is_err());
    }

    fn entries(x: &[bool], s: Option<&[f64]>) -> Vec<LeakageEntry> {
        x.iter()
            .enumerate()
            .map(|(i, &shared)| LeakageEntry { product_id: i.to_string(), shared, score: s.map(|s| s[i]) })
            .collect()
    }

    #[test]
    fn leakage() {
        assert_eq!(privacy_leakage(&entries(&[true, false, true, false], None)).unwrap().pl_b, 0.5);
        let l = privacy_leakage(&entries(&[true, false, false, true], Some(&[0.9, 0.1, 0.5, 0.5]))).unwrap();
        assert_abs_diff_eq!(l.pl_s.unwrap(), 0.7, epsilon = 1e-12);
        let all = privacy_leakage(&entries(&[true; 3], Some(&[0.2, 0.3, 0.9]))).unwrap();
        assert_eq!((all.pl_b, all.pl_s), (1.0, Some(1.0)));
        assert!(matches!(privacy_leakage(&[]), Err(EvalError::NotApplicable)));
        assert_eq!(privacy_leakage(&entries(&[true], Some(&[0.0]))).unwrap().pl_s, None);
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|c| {
            let simplex = move || prop::collection::vec(0.0..1.0f64, c).prop_map(|v| {
                let s: f64 = v.iter().sum();
                if s == 0.0 { v } else { v.iter().map(|x| x / s).collect() }
            });
            (simplex(), simplex())
        })
    }

    proptest! {
        #[test]
        fn norm_sandwich((a, b) in pair()) {
            let names: Vec<String> = (0..a.len()).map(|i| i.to_string()).collect();
            let da = CategoryDistribution { categories: names.clone(), proportions: a, empty: false };
            let db = CategoryDistribution { categories: names.clone(), proportions: b, empty: false };
            let (l1, l2) = (l1_distance(&da, &db).unwrap(), l2_distance(&da, &db).unwrap());
            prop_assert!(l2 <= l1 + 1e-12);
            prop_assert!(l1 <= (names.len() as f64).sqrt() * l2 + 1e-12);
            prop_assert!(l1 <= 2.0 + 1e-12);
        }

        #[test]
        fn pl_s_ratio_properties(flags in prop::collection::vec(any::<bool>(), 1..40), c in 0.01..1.0f64, k in 0.01..1.0f64) {
            let equal = entries(&flags, Some(&vec![c; flags.len()]));
            let l = privacy_leakage(&equal).unwrap();
            prop_assert!((l.pl_s.unwrap() - l.pl_b).abs() <= 1e-12);
            let scores: Vec<f64> = (0..flags.len()).map(|i| 0.05 + (i as f64 * 0.37) % 0.9).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
            let a = privacy_leakage(&entries(&flags, Some(&scores))).unwrap().pl_s.unwrap();
            let b = privacy_leakage(&entries(&flags, Some(&scaled))).unwrap().pl_s.unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn distribution_sums_to_one(cats in prop::collection::vec(0usize..6, 1..30)) {
            let u: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
            let names: Vec<String> = cats.iter().map(|&i| format!("c{i}")).collect();
            let d = distribution(&names, &u).unwrap();
            prop_assert!((d.proportions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
