//! Built-in consistency checks: each library metric against a direct
//! re-derivation on randomized inputs, plus fixed reference values.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::evaluation::{
    distribution, hr10_category, hr10_exact, hr10_semantic, l1_distance, l2_distance, per_group_distances, privacy_leakage,
    recovery, UserOutcome,
};
use crate::pipeline::{allocate, timing_extra, LeakageEntry};
use crate::retrieval::{hash_embed, IndexRow, VectorIndex};
use crate::sensitivity::{focal_gradient, focal_objective, ClassWeights, EncodedSample, FocalLossParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_selfcheck(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        metric_oracles(&mut rng, 500),
        reference_values(),
        allocation_grid(),
        focal_gradient_check(&mut rng, 100),
        retrieval_check(&mut rng),
    ]
}

fn outcome(name: &'static str, failures: Vec<String>, ok_detail: String) -> CheckOutcome {
    match failures.first() {
        None => CheckOutcome { name, passed: true, detail: ok_detail },
        Some(first) => CheckOutcome { name, passed: false, detail: format!("{} failure(s); first: {first}", failures.len()) },
    }
}

struct Instance {
    universe: Vec<String>,
    sensitive: Vec<String>,
    users: Vec<UserOutcome>,
    base_cats: Vec<String>,
    sys_cats: Vec<String>,
    leakage: Vec<LeakageEntry>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let c = rng.gen_range(2..=12);
    let universe: Vec<String> = (0..c).map(|i| format!("cat{i:02}")).collect();
    let n_sens = rng.gen_range(1..c);
    let sensitive = universe[..n_sens].to_vec();
    let pick = |rng: &mut ChaCha8Rng| universe[rng.gen_range(0..c)].clone();
    let n_users = rng.gen_range(1..=50);
    let users = (0..n_users)
        .map(|u| {
            let k = rng.gen_range(0..=10);
            let ids: Vec<String> = (0..k).map(|_| format!("p{}", rng.gen_range(0..30))).collect();
            let cats: Vec<String> = (0..k).map(|_| pick(rng)).collect();
            let sims = (0..k).map(|_| if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(-1.0..=1.0)) }).collect();
            UserOutcome {
                user_id: format!("u{u}"),
                target_id: format!("p{}", rng.gen_range(0..30)),
                target_category: pick(rng),
                resolved_ids: ids,
                resolved_categories: cats,
                target_similarity: sims,
            }
        })
        .collect();
    let base_cats = (0..rng.gen_range(1..=60)).map(|_| pick(rng)).collect();
    let sys_cats = (0..rng.gen_range(1..=60)).map(|_| pick(rng)).collect();
    let with_scores = rng.gen_bool(0.7);
    let leakage = (0..rng.gen_range(1..=40))
        .map(|i| LeakageEntry {
            product_id: format!("s{i}"),
            shared: rng.gen_bool(0.5),
            score: with_scores.then(|| rng.gen_range(0.01..=1.0)),
        })
        .collect();
    Instance { universe, sensitive, users, base_cats, sys_cats, leakage }
}

fn oracle_proportions(cats: &[String], universe: &[String]) -> Vec<f64> {
    let mut counts: HashMap<&str, f64> = HashMap::new();
    for c in cats {
        *counts.entry(c.as_str()).or_default() += 1.0;
    }
    universe.iter().map(|u| counts.get(u.as_str()).copied().unwrap_or(0.0) / cats.len() as f64).collect()
}

fn metric_oracles(rng: &mut ChaCha8Rng, instances: usize) -> CheckOutcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst = random_instance(rng);
        let n = inst.users.len() as f64;
        let mut exact = 0.0;
        let mut category = 0.0;
        let mut semantic = 0.0;
        for u in &inst.users {
            if u.resolved_ids.contains(&u.target_id) {
                exact += 1.0;
            }
            if u.resolved_categories.contains(&u.target_category) {
                category += 1.0;
            }
            let mut best: Option<f64> = None;
            for s in u.target_similarity.iter().flatten() {
                if best.is_none() || *s > best.unwrap() {
                    best = Some(*s);
                }
            }
            semantic += best.unwrap_or(0.0);
        }
        let pb = oracle_proportions(&inst.base_cats, &inst.universe);
        let ps = oracle_proportions(&inst.sys_cats, &inst.universe);
        let mut o_l1 = 0.0;
        let mut o_l2 = 0.0;
        let (mut sl1, mut sl2, mut sk, mut nl1, mut nl2, mut nk) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..inst.universe.len() {
            let d = pb[j] - ps[j];
            o_l1 += d.abs();
            o_l2 += d * d;
            if inst.sensitive.contains(&inst.universe[j]) {
                sl1 += d.abs();
                sl2 += d * d;
                sk += 1.0;
            } else {
                nl1 += d.abs();
                nl2 += d * d;
                nk += 1.0;
            }
        }
        let shared: Vec<&LeakageEntry> = inst.leakage.iter().filter(|e| e.shared).collect();
        let o_pl_b = shared.len() as f64 / inst.leakage.len() as f64;
        let o_pl_s = inst.leakage.iter().all(|e| e.score.is_some()).then(|| {
            shared.iter().map(|e| e.score.unwrap()).sum::<f64>() / inst.leakage.iter().map(|e| e.score.unwrap()).sum::<f64>()
        });

        let base = distribution(&inst.base_cats, &inst.universe).expect("valid instance");
        let sys = distribution(&inst.sys_cats, &inst.universe).expect("valid instance");
        let groups = per_group_distances(&base, &sys, &inst.sensitive).expect("both groups nonempty");
        let leak = privacy_leakage(&inst.leakage).expect("nonempty leakage");
        let mut pairs = vec![
            ("hr10_exact", hr10_exact(&inst.users), exact / n),
            ("hr10_category", hr10_category(&inst.users), category / n),
            ("hr10_semantic", hr10_semantic(&inst.users).value, semantic / n),
            ("l1", l1_distance(&base, &sys).unwrap(), o_l1),
            ("l2", l2_distance(&base, &sys).unwrap(), o_l2.sqrt()),
            ("sensitive avg_l1", groups.sensitive.avg_l1, sl1 / sk),
            ("sensitive avg_l2", groups.sensitive.avg_l2, (sl2 / sk).sqrt()),
            ("nonsensitive avg_l1", groups.nonsensitive.avg_l1, nl1 / nk),
            ("nonsensitive avg_l2", groups.nonsensitive.avg_l2, (nl2 / nk).sqrt()),
            ("pl_b", leak.pl_b, o_pl_b),
        ];
        for (a, b) in base.proportions.iter().zip(&pb).chain(sys.proportions.iter().zip(&ps)) {
            pairs.push(("distribution", *a, *b));
        }
        match (leak.pl_s, o_pl_s) {
            (Some(a), Some(b)) => pairs.push(("pl_s", a, b)),
            (None, None) => {}
            (a, b) => failures.push(format!("instance {i}: pl_s presence {a:?} vs {b:?}")),
        }
        for (name, got, want) in pairs {
            let d = (got - want).abs();
            worst = worst.max(d);
            if d > 1e-12 {
                failures.push(format!("instance {i}: {name} {got} vs {want}"));
            }
        }
    }
    outcome("metric oracle equivalence", failures, format!("{instances} instances, max |delta| {worst:.3e}"))
}

fn reference_values() -> CheckOutcome {
    let mut failures = Vec::new();
    let r2 = recovery(0.4860, 0.2847).unwrap_or(f64::NAN);
    if r2.is_nan() || (r2 - 41.42).abs() > 0.11 {
        failures.push(format!("L2 recovery {r2}"));
    }
    let r1 = recovery(0.8462, 0.4773).unwrap_or(f64::NAN);
    if r1.is_nan() || (r1 - 43.59).abs() > 0.02 {
        failures.push(format!("L1 recovery {r1}"));
    }
    let t = timing_extra(0.1808, 2.7428, 6.3816);
    if (t - 3.8196).abs() > 1e-12 || format!("{t:.4}") != "3.8196" {
        failures.push(format!("timing_extra {t}"));
    }
    outcome("reference values", failures, format!("recovery L2 {r2:.4}%, L1 {r1:.4}%, extra latency {t:.4} s"))
}

fn allocation_grid() -> CheckOutcome {
    let mut failures = Vec::new();
    let mut cases = 0;
    for n in 1..=20usize {
        for s in 0..=20usize {
            for ns in 0..=20usize {
                if s + ns == 0 {
                    continue;
                }
                cases += 1;
                let a = match allocate(n, s, ns) {
                    Ok(a) => a,
                    Err(e) => {
                        failures.push(format!("({n},{s},{ns}): {e}"));
                        continue;
                    }
                };
                // Nearest integer to n*s/(s+ns), ties upward, then at least 1 if s > 0.
                let t = (s + ns) as i64;
                let target = (n * s) as i64;
                let mut best = 0i64;
                for k in 0..=n as i64 {
                    let (dk, db) = ((k * t - target).abs(), (best * t - target).abs());
                    if dk < db || (dk == db && k > best) {
                        best = k;
                    }
                }
                if s > 0 && best == 0 {
                    best = 1;
                }
                if a.n_s as i64 != best || a.n_ns + a.n_s != n || (a.n_s == 0) != (s == 0) {
                    failures.push(format!("({n},{s},{ns}) -> {a:?}, expected n_s {best}"));
                }
            }
        }
    }
    outcome("allocation grid", failures, format!("{cases} cases"))
}

fn focal_gradient_check(rng: &mut ChaCha8Rng, instances: usize) -> CheckOutcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let dim = rng.gen_range(1..=6);
        let weights: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let bias = rng.gen_range(-1.0..1.0);
        let samples: Vec<EncodedSample> = (0..rng.gen_range(1..=8))
            .map(|_| {
                let mut features: Vec<usize> = (0..dim).filter(|_| rng.gen_bool(0.5)).collect();
                features.dedup();
                EncodedSample { features, sensitive: rng.gen_bool(0.4) }
            })
            .collect();
        let params = FocalLossParams::new(
            rng.gen_range(0.0..4.0),
            ClassWeights { nonsensitive: rng.gen_range(0.2..3.0), sensitive: rng.gen_range(0.2..3.0) },
        )
        .expect("valid params");
        let (grad, grad_bias) = focal_gradient(&weights, bias, &samples, &params);
        let h = 1e-6;
        let mut check = |analytic: f64, plus: f64, minus: f64, what: String| {
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = if (analytic - numeric).abs() < 1e-9 { 0.0 } else { rel };
            worst = worst.max(rel);
            if rel > 1e-4 {
                failures.push(format!("instance {i} {what}: analytic {analytic} numeric {numeric}"));
            }
        };
        for j in 0..dim {
            let mut wp = weights.clone();
            wp[j] += h;
            let mut wm = weights.clone();
            wm[j] -= h;
            check(
                grad[j],
                focal_objective(&wp, bias, &samples, &params),
                focal_objective(&wm, bias, &samples, &params),
                format!("w{j}"),
            );
        }
        check(
            grad_bias,
            focal_objective(&weights, bias + h, &samples, &params),
            focal_objective(&weights, bias - h, &samples, &params),
            "bias".into(),
        );
    }
    outcome("focal-loss gradient", failures, format!("{instances} instances, max rel. error {worst:.3e}"))
}

fn retrieval_check(rng: &mut ChaCha8Rng) -> CheckOutcome {
    const WORDS: [&str; 16] = [
        "cotton", "steel", "organic", "wireless", "travel", "kitchen", "garden", "leather", "vitamin", "camera", "puzzle", "candle",
        "yoga", "coffee", "pillow", "lamp",
    ];
    let dim = 384;
    let mut failures = Vec::new();
    let texts: Vec<String> = (0..300)
        .map(|i| {
            let words: Vec<&str> = (0..4).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
            format!("item {i} {}", words.join(" "))
        })
        .collect();
    let rows: Vec<IndexRow> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| IndexRow { product_id: format!("p{i:04}"), category: String::new(), embedding: hash_embed(t, dim) })
        .collect();
    let index = VectorIndex::from_rows(dim, rows).expect("valid rows");
    for (i, t) in texts.iter().enumerate() {
        let top = index.nearest(&hash_embed(t, dim), 1).expect("nonempty index");
        if top[0].product_id != format!("p{i:04}") {
            failures.push(format!("self-retrieval miss for p{i:04}"));
        }
    }
    for q in 0..50 {
        let query = hash_embed(&format!("{} {}", WORDS[q % 16], WORDS[(q * 7) % 16]), dim);
        let got: Vec<String> = index.nearest(&query, 10).expect("query").into_iter().map(|n| n.product_id).collect();
        let mut all: Vec<(f64, &str)> = index
            .rows()
            .iter()
            .map(|r| {
                let dot: f64 = r.embedding.0.iter().zip(&query.0).map(|(a, b)| a * b).sum();
                (dot / (r.embedding.norm() * query.norm()), r.product_id.as_str())
            })
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let want: Vec<&str> = all.iter().take(10).map(|x| x.1).collect();
        if got != want {
            failures.push(format!("query {q}: ranking differs from exhaustive scan"));
        }
    }
    outcome("retrieval", failures, "300-item self-retrieval, 50 exhaustive-scan comparisons".into())
}
