use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{AuditEntry, Leg, RunManifest};
use super::{allocate, backend_category, timing_extra, Allocation, ExperimentConfig, PipelineError, Scheme};
use crate::catalog::{Catalog, Product, PurchaseHistory};
use crate::gateway::{
    build_backend, complete, parse_numbered_list, render_prompt, ChatClient, ChatRequest, PromptTemplate, Provenance,
    RecommendationSet, RetrievalContext,
};
use crate::retrieval::{cosine, EmbeddingProvider, Neighbor, RetrievalError, VectorIndex};
use crate::sensitivity::{partition, Scorer, SensitivityVerdict};

/// Recommendations considered by the hit-rate metrics.
pub const TOP_K: usize = 10;

/// Everything a run needs, shared read-only across users.
#[derive(Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub catalog: Arc<Catalog>,
    pub index: Arc<VectorIndex>,
    pub provider: EmbeddingProvider,
    pub scorer: Option<Scorer>,
    pub server: Option<Arc<dyn ChatClient>>,
    pub local: Option<Arc<dyn ChatClient>>,
}

impl RunContext {
    /// Builds scorer and backends from the configuration.
    pub fn from_config(
        config: ExperimentConfig,
        catalog: Arc<Catalog>,
        index: Arc<VectorIndex>,
        provider: EmbeddingProvider,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let retrieval = RetrievalContext { catalog: catalog.clone(), index: index.clone(), provider: provider.clone() };
        let scorer = match (&config.scorer, config.scheme.obfuscates()) {
            (Some(s), true) => Some(Scorer::from_config(s)?),
            _ => None,
        };
        let server = match (&config.server_backend, config.scheme.needs_server()) {
            (Some(b), true) => Some(build_backend(b, Some(&retrieval))?),
            _ => None,
        };
        let local = match (&config.local_backend, config.scheme.needs_local()) {
            (Some(b), true) => Some(build_backend(b, Some(&retrieval))?),
            _ => None,
        };
        Self::new(config, catalog, index, provider, scorer, server, local)
    }

    /// Assembles a context from ready-made parts; backend configs in
    /// `config` are not consulted.
    pub fn new(
        config: ExperimentConfig,
        catalog: Arc<Catalog>,
        index: Arc<VectorIndex>,
        provider: EmbeddingProvider,
        scorer: Option<Scorer>,
        server: Option<Arc<dyn ChatClient>>,
        local: Option<Arc<dyn ChatClient>>,
    ) -> Result<Self, PipelineError> {
        let scheme = config.scheme;
        if config.n_total < 1 || config.parallelism < 1 {
            return Err(PipelineError::Config("n_total and parallelism must be at least 1".into()));
        }
        if scheme.obfuscates() && scorer.is_none() {
            return Err(PipelineError::Config(format!("{scheme} requires a scorer")));
        }
        if scheme.needs_server() && server.is_none() {
            return Err(PipelineError::Config(format!("{scheme} requires a server backend")));
        }
        if scheme.needs_local() && local.is_none() {
            return Err(PipelineError::Config(format!("{scheme} requires a local backend")));
        }
        if index.dimension() != provider.dimension() {
            return Err(PipelineError::Config(format!(
                "index dimension {} differs from provider dimension {}",
                index.dimension(),
                provider.dimension()
            )));
        }
        Ok(Self { config, catalog, index, provider, scorer, server, local })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum UserStatus {
    Ok,
    Failed { category: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecommendation {
    pub rank: usize,
    pub text: String,
    pub provenance: Provenance,
}

/// One ground-truth-sensitive history item and whether the server saw it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageEntry {
    pub product_id: String,
    pub shared: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub t_obf: f64,
    pub t_rec: f64,
    pub t_deobf: f64,
    pub t_total_extra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRunRecord {
    pub user_id: String,
    pub scheme: Scheme,
    pub status: UserStatus,
    pub target_id: String,
    pub target_category: String,
    pub verdicts: Vec<SensitivityVerdict>,
    pub allocation: Allocation,
    /// Products whose text went to the server backend.
    pub server_items: Vec<String>,
    pub local_items: Vec<String>,
    pub r_ns: Option<RecommendationSet>,
    pub r_s: Option<RecommendationSet>,
    pub r_final: Vec<FinalRecommendation>,
    /// Top-1 catalog match per `r_final` entry.
    pub resolved: Vec<Neighbor>,
    /// Cosine of each `r_final` entry to the target text; `None` when undefined.
    pub target_similarity: Vec<Option<f64>>,
    pub shortfall: usize,
    pub leakage: Vec<LeakageEntry>,
    pub timings: Timings,
}

impl UserRunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == UserStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub records: Vec<UserRunRecord>,
    pub audit: Vec<AuditEntry>,
}

struct LegFailure {
    category: String,
    message: String,
}

struct LegOutcome {
    set: Result<RecommendationSet, LegFailure>,
    audit: Vec<AuditEntry>,
    elapsed: f64,
}

struct LegSpec<'a> {
    leg: Leg,
    client: &'a dyn ChatClient,
    template: PromptTemplate,
    count: usize,
    items: &'a [Product],
}

fn contains_sensitive(items: &[Product], flagged: &HashSet<&str>) -> bool {
    items.iter().any(|p| p.ground_truth_sensitive == Some(true) || flagged.contains(p.id.as_str()))
}

async fn run_leg(spec: LegSpec<'_>, cfg: &ExperimentConfig, user_id: &str, flagged: &HashSet<&str>) -> LegOutcome {
    let start = Instant::now();
    let history: Vec<_> = spec.items.iter().map(Product::canonical_text).collect();
    let rendered = match render_prompt(&spec.template, spec.count, &history) {
        Ok(r) => r,
        Err(e) => {
            return LegOutcome {
                set: Err(LegFailure { category: "template".into(), message: e.to_string() }),
                audit: Vec::new(),
                elapsed: 0.0,
            }
        }
    };
    let user = match &cfg.query {
        Some(q) => format!("User query: {q}\n\n{}", rendered.user),
        None => rendered.user,
    };
    let req = ChatRequest { system: rendered.system, user, count: spec.count, history };
    let provenance = match spec.leg {
        Leg::Server => Provenance::Server,
        Leg::Local => Provenance::Local,
    };
    let attempts = if cfg.reprompt_on_shortfall { 2 } else { 1 };
    let sensitive_payload = contains_sensitive(spec.items, flagged);
    let mut audit = Vec::new();
    let mut best: Option<RecommendationSet> = None;
    let mut failure = None;
    for attempt in 0..attempts {
        let result = complete(spec.client, &req).await;
        let mut entry = AuditEntry {
            user_id: user_id.to_string(),
            leg: spec.leg,
            attempt,
            system: req.system.clone(),
            user: req.user.clone(),
            response: None,
            error: None,
            contains_sensitive: sensitive_payload,
        };
        match result {
            Ok(c) => {
                entry.response = Some(c.text.clone());
                match parse_numbered_list(&c.text, spec.count) {
                    Ok(parsed) => {
                        let set = RecommendationSet {
                            entries: parsed.entries,
                            provenance,
                            raw_response: c.text,
                            latency_seconds: c.latency_seconds,
                            shortfall: parsed.shortfall,
                        };
                        if best.as_ref().is_none_or(|b| set.entries.len() > b.entries.len()) {
                            best = Some(set);
                        }
                    }
                    Err(e) => {
                        entry.error = Some(e.to_string());
                        failure.get_or_insert(LegFailure { category: "parse".into(), message: e.to_string() });
                    }
                }
            }
            Err(e) => {
                entry.error = Some(e.to_string());
                failure.get_or_insert(LegFailure { category: backend_category(e.kind).into(), message: e.message.clone() });
            }
        }
        audit.push(entry);
        if best.as_ref().is_some_and(|b| b.shortfall == 0) {
            break;
        }
    }
    let set = match (best, failure) {
        (Some(b), _) => Ok(b),
        (None, Some(f)) => Err(f),
        (None, None) => Err(LegFailure { category: "empty".into(), message: "no attempt produced a response".into() }),
    };
    LegOutcome { set, audit, elapsed: start.elapsed().as_secs_f64() }
}

async fn maybe_leg(spec: Option<LegSpec<'_>>, cfg: &ExperimentConfig, user_id: &str, flagged: &HashSet<&str>) -> Option<LegOutcome> {
    match spec {
        Some(s) => Some(run_leg(s, cfg, user_id, flagged).await),
        None => None,
    }
}

fn failed(mut record: UserRunRecord, category: &str, message: String) -> UserRunRecord {
    record.status = UserStatus::Failed { category: category.to_string(), message };
    record
}

async fn resolve(
    ctx: &RunContext,
    target: &Product,
    recs: &[FinalRecommendation],
) -> Result<(Vec<Neighbor>, Vec<Option<f64>>), RetrievalError> {
    if recs.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut texts: Vec<String> = recs.iter().map(|r| r.text.clone()).collect();
    texts.push(target.canonical_text().0);
    let mut embeddings = ctx.provider.embed(&texts).await?;
    let target_vec = embeddings.pop().expect("target embedding");
    let mut resolved = Vec::with_capacity(recs.len());
    let mut sims = Vec::with_capacity(recs.len());
    for e in &embeddings {
        let top = ctx.index.nearest(e, 1)?;
        resolved.push(top.into_iter().next().ok_or(RetrievalError::EmptyIndex)?);
        sims.push(match cosine(e, &target_vec) {
            Ok(s) => Some(s),
            Err(RetrievalError::ZeroVector) => None,
            Err(other) => return Err(other),
        });
    }
    Ok((resolved, sims))
}

/// Runs one user through the configured scheme. Backend, parse and
/// retrieval problems yield a failed record; only a breach of the privacy
/// guard aborts with an error.
pub async fn run_user(ctx: &RunContext, h: &PurchaseHistory) -> Result<(UserRunRecord, Vec<AuditEntry>), PipelineError> {
    let cfg = &ctx.config;
    let scheme = cfg.scheme;
    let n = cfg.n_total;
    let mut record = UserRunRecord {
        user_id: h.user_id.clone(),
        scheme,
        status: UserStatus::Ok,
        target_id: h.target.id.clone(),
        target_category: h.target.main_category.clone(),
        verdicts: Vec::new(),
        allocation: Allocation { n_ns: 0, n_s: 0 },
        server_items: Vec::new(),
        local_items: Vec::new(),
        r_ns: None,
        r_s: None,
        r_final: Vec::new(),
        resolved: Vec::new(),
        target_similarity: Vec::new(),
        shortfall: n,
        leakage: leakage_entries(h, &HashSet::new()),
        timings: Timings::default(),
    };
    if h.items.is_empty() {
        return Ok((failed(record, "input", "history is empty".into()), Vec::new()));
    }

    let split_start = Instant::now();
    let (server_items, local_items, allocation) = match scheme {
        Scheme::Baseline => (h.items.clone(), Vec::new(), Allocation { n_ns: n, n_s: 0 }),
        Scheme::OnlyLocal => (Vec::new(), h.items.clone(), Allocation { n_ns: 0, n_s: n }),
        _ => {
            let scorer = ctx.scorer.as_ref().expect("validated: obfuscating schemes carry a scorer");
            let verdicts = match scorer.score_batch(&h.items).await {
                Ok(v) => v,
                Err(e) => return Ok((failed(record, "scorer", e.to_string()), Vec::new())),
            };
            let split = partition(&h.items, verdicts)?;
            let allocation = allocate(n, split.sensitive.len(), split.nonsensitive.len())?;
            record.verdicts = split.verdicts;
            let local = if scheme.deobfuscates() { split.sensitive } else { Vec::new() };
            (split.nonsensitive, local, allocation)
        }
    };
    let t_obf = if scheme.obfuscates() { split_start.elapsed().as_secs_f64() } else { 0.0 };
    record.allocation = allocation;

    let flagged: HashSet<&str> = record.verdicts.iter().filter(|v| v.is_sensitive).map(|v| v.product_id.as_str()).collect();
    if scheme.obfuscates() {
        if let Some(p) = server_items.iter().find(|p| flagged.contains(p.id.as_str())) {
            return Err(PipelineError::PrivacyViolation(p.id.clone()));
        }
    }

    let local_count = if scheme.needs_local() { allocation.n_s } else { 0 };
    let server_spec = match &ctx.server {
        Some(client) if scheme.needs_server() && allocation.n_ns > 0 && !server_items.is_empty() => Some(LegSpec {
            leg: Leg::Server,
            client: client.as_ref(),
            template: PromptTemplate::server_recommendation(),
            count: allocation.n_ns,
            items: &server_items,
        }),
        _ => None,
    };
    let local_spec = match &ctx.local {
        Some(client) if local_count > 0 && !local_items.is_empty() => Some(LegSpec {
            leg: Leg::Local,
            client: client.as_ref(),
            template: PromptTemplate::local_deobfuscation(),
            count: local_count,
            items: &local_items,
        }),
        _ => None,
    };
    if server_spec.is_some() {
        record.server_items = server_items.iter().map(|p| p.id.clone()).collect();
    }
    if local_spec.is_some() {
        record.local_items = local_items.iter().map(|p| p.id.clone()).collect();
    }
    let shared: HashSet<&str> = record.server_items.iter().map(String::as_str).collect();
    record.leakage = leakage_entries(h, &shared);

    let (server_out, local_out) = tokio::join!(
        maybe_leg(server_spec, cfg, &h.user_id, &flagged),
        maybe_leg(local_spec, cfg, &h.user_id, &flagged)
    );
    let t_rec = server_out.as_ref().map_or(0.0, |o| o.elapsed);
    let t_deobf = local_out.as_ref().map_or(0.0, |o| o.elapsed);
    record.timings = Timings { t_obf, t_rec, t_deobf, t_total_extra: timing_extra(t_obf, t_rec, t_deobf) };

    let mut audit = Vec::new();
    let mut failure: Option<LegFailure> = None;
    for out in [server_out, local_out].into_iter().flatten() {
        audit.extend(out.audit);
        match out.set {
            Ok(set) => match set.provenance {
                Provenance::Server => record.r_ns = Some(set),
                Provenance::Local => record.r_s = Some(set),
            },
            Err(f) => {
                failure.get_or_insert(f);
            }
        }
    }
    if let Some(f) = failure {
        return Ok((failed(record, &f.category, f.message), audit));
    }

    record.r_final = record
        .r_ns
        .iter()
        .chain(record.r_s.iter())
        .flat_map(|set| set.entries.iter().map(move |e| (set.provenance, e.text.clone())))
        .enumerate()
        .map(|(i, (provenance, text))| FinalRecommendation { rank: i + 1, text, provenance })
        .collect();
    record.shortfall = n.saturating_sub(record.r_final.len());
    match resolve(ctx, &h.target, &record.r_final).await {
        Ok((resolved, sims)) => {
            record.resolved = resolved;
            record.target_similarity = sims;
        }
        Err(e) => return Ok((failed(record, "retrieval", e.to_string()), audit)),
    }
    Ok((record, audit))
}

fn leakage_entries(h: &PurchaseHistory, shared: &HashSet<&str>) -> Vec<LeakageEntry> {
    h.items
        .iter()
        .filter(|p| p.ground_truth_sensitive == Some(true))
        .map(|p| LeakageEntry { product_id: p.id.clone(), shared: shared.contains(p.id.as_str()), score: p.sensitivity_score })
        .collect()
}

/// Runs every history with at most `parallelism` users in flight. Users are
/// dispatched in a seed-determined order; output is sorted by user id.
pub async fn run_experiment(ctx: &RunContext, histories: &[PurchaseHistory]) -> Result<RunOutput, PipelineError> {
    if histories.is_empty() {
        return Err(PipelineError::Config("no histories to run".into()));
    }
    let mut order: Vec<usize> = (0..histories.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.config.seed));
    let results: Vec<_> = stream::iter(order)
        .map(|i| run_user(ctx, &histories[i]))
        .buffer_unordered(ctx.config.parallelism)
        .collect()
        .await;
    let mut records = Vec::with_capacity(results.len());
    let mut audit = Vec::new();
    for r in results {
        let (rec, entries) = r?;
        records.push(rec);
        audit.extend(entries);
    }
    records.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    audit.sort_by(|a, b| (&a.user_id, a.leg, a.attempt).cmp(&(&b.user_id, b.leg, b.attempt)));
    let manifest = RunManifest::new(ctx, &records, &audit);
    let total = records.len();
    let failures: Vec<String> = records
        .iter()
        .filter_map(|r| match &r.status {
            UserStatus::Failed { category, .. } => Some(category.clone()),
            UserStatus::Ok => None,
        })
        .collect();
    let n_failed = failures.len();
    let output = RunOutput { manifest, records, audit };
    if n_failed > 0 && n_failed as f64 > ctx.config.failure_cap * total as f64 {
        tracing::warn!(failed = n_failed, total, "failure cap exceeded");
        let output = Box::new(output);
        if n_failed == total && failures.iter().all(|c| c == "transport") {
            return Err(PipelineError::BackendUnreachable { failed: n_failed, total, output });
        }
        return Err(PipelineError::FailureCapExceeded { failed: n_failed, total, output });
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendError, RecordingChat, ScriptedChat};
    use crate::retrieval::build_index;
    use std::time::Duration;

    const SENSITIVE: &str = "Health & Household";

    fn product(id: &str, cat: &str, title: &str) -> Product {
        let mut p = Product::new(id, cat, title);
        p.ground_truth_sensitive = Some(cat == SENSITIVE);
        p
    }

    fn catalog() -> Catalog {
        let mut ps = Vec::new();
        for i in 0..30 {
            ps.push(product(&format!("b{i:02}"), "Books", &format!("novel volume {i}")));
            ps.push(product(&format!("h{i:02}"), SENSITIVE, &format!("vitamin pack {i}")));
        }
        Catalog::from_products(ps).0
    }

    fn history(c: &Catalog, user: &str, ids: &[&str], target: &str) -> PurchaseHistory {
        PurchaseHistory {
            user_id: user.into(),
            items: ids.iter().map(|id| c.get(id).unwrap().clone()).collect(),
            target: c.get(target).unwrap().clone(),
        }
    }

    async fn ctx(scheme: Scheme, server: Option<Arc<dyn ChatClient>>, local: Option<Arc<dyn ChatClient>>) -> RunContext {
        let catalog = Arc::new(catalog());
        let provider = EmbeddingProvider::hash(64).unwrap();
        let index = Arc::new(build_index(&catalog, &provider).await.unwrap());
        let scorer = scheme.obfuscates().then(|| Scorer::categorical([SENSITIVE], 0.5).unwrap());
        RunContext::new(ExperimentConfig::new(scheme), catalog, index, provider, scorer, server, local).unwrap()
    }

    fn numbered(p: &str) -> Arc<dyn ChatClient> {
        Arc::new(ScriptedChat::numbered(p))
    }

    #[tokio::test]
    async fn deobf_merge_and_provenance() {
        let c = ctx(Scheme::CatObfDeobf, Some(numbered("s")), Some(numbered("l"))).await;
        let h = history(&c.catalog, "u", &["b01", "h01", "b02", "b03", "h02"], "b04");
        let (r, audit) = run_user(&c, &h).await.unwrap();
        assert!(r.is_ok());
        assert_eq!(r.allocation, Allocation { n_ns: 6, n_s: 4 });
        assert_eq!(r.r_final.len(), 10);
        assert!(r.r_final[..6].iter().all(|e| e.provenance == Provenance::Server));
        assert!(r.r_final[6..].iter().all(|e| e.provenance == Provenance::Local));
        assert_eq!(r.resolved.len(), 10);
        assert_eq!(r.server_items, ["b01", "b02", "b03"]);
        assert_eq!(r.local_items, ["h01", "h02"]);
        assert!(r.leakage.iter().all(|l| !l.shared));
        assert_eq!(audit.len(), 2);
        assert!(!audit.iter().find(|a| a.leg == Leg::Server).unwrap().contains_sensitive);
    }

    #[tokio::test]
    async fn baseline_shares_everything() {
        let c = ctx(Scheme::Baseline, Some(numbered("s")), None).await;
        let h = history(&c.catalog, "u", &["b01", "h01", "h02"], "b04");
        let (r, _) = run_user(&c, &h).await.unwrap();
        assert_eq!(r.allocation, Allocation { n_ns: 10, n_s: 0 });
        assert_eq!(r.leakage.len(), 2);
        assert!(r.leakage.iter().all(|l| l.shared));
    }

    #[tokio::test]
    async fn all_sensitive_obf_only_sends_nothing() {
        let server = Arc::new(RecordingChat::new(numbered("s")));
        let c = ctx(Scheme::CatObfOnly, Some(server.clone()), None).await;
        let h = history(&c.catalog, "u", &["h01", "h02"], "h03");
        let (r, audit) = run_user(&c, &h).await.unwrap();
        assert!(r.is_ok());
        assert_eq!(r.allocation, Allocation { n_ns: 0, n_s: 10 });
        assert!(server.requests().is_empty() && audit.is_empty());
        assert_eq!((r.r_final.len(), r.shortfall), (0, 10));
    }

    #[tokio::test]
    async fn obf_only_requests_nonsensitive_share() {
        let c = ctx(Scheme::CatObfOnly, Some(numbered("s")), None).await;
        let h = history(&c.catalog, "u", &["b01", "h01", "b02", "b03", "h02"], "b04");
        let (r, _) = run_user(&c, &h).await.unwrap();
        assert_eq!((r.r_final.len(), r.shortfall), (6, 4));
        assert!(r.r_s.is_none());
    }

    #[tokio::test]
    async fn only_local_uses_full_history() {
        let local = Arc::new(RecordingChat::new(numbered("l")));
        let c = ctx(Scheme::OnlyLocal, None, Some(local.clone())).await;
        let h = history(&c.catalog, "u", &["b01", "h01"], "b04");
        let (r, _) = run_user(&c, &h).await.unwrap();
        assert_eq!(r.r_final.len(), 10);
        assert_eq!(local.requests()[0].history.len(), 2);
        assert!(local.requests()[0].system.contains("suggest only 10 other products"));
        assert!(r.leakage.iter().all(|l| !l.shared));
    }

    #[tokio::test]
    async fn legs_run_concurrently() {
        let slow = |p: &str| -> Arc<dyn ChatClient> { Arc::new(ScriptedChat::numbered(p).with_delay(Duration::from_millis(400))) };
        let c = ctx(Scheme::CatObfDeobf, Some(slow("s")), Some(slow("l"))).await;
        let h = history(&c.catalog, "u", &["b01", "h01"], "b04");
        let start = Instant::now();
        let (r, _) = run_user(&c, &h).await.unwrap();
        let wall = start.elapsed().as_secs_f64();
        assert!(r.is_ok());
        assert!(wall < 0.8, "{wall}");
        assert!(r.timings.t_rec >= 0.4 && r.timings.t_deobf >= 0.4);
    }

    #[tokio::test]
    async fn backend_failure_isolated_and_categorized() {
        let c = ctx(Scheme::Baseline, Some(Arc::new(ScriptedChat::failing(BackendError::transport("down")))), None).await;
        let h = history(&c.catalog, "u", &["b01"], "b04");
        let (r, _) = run_user(&c, &h).await.unwrap();
        assert_eq!(r.status, UserStatus::Failed { category: "transport".into(), message: "down".into() });
        assert!(r.leakage.is_empty());
    }

    #[tokio::test]
    async fn unparseable_response_fails_user() {
        let c = ctx(Scheme::Baseline, Some(Arc::new(ScriptedChat::replay(vec!["sorry".into()]))), None).await;
        let h = history(&c.catalog, "u", &["b01"], "b04");
        let (r, _) = run_user(&c, &h).await.unwrap();
        assert!(matches!(r.status, UserStatus::Failed { ref category, .. } if category == "parse"));
    }

    #[tokio::test]
    async fn reprompt_takes_longer_list() {
        let script = vec!["1. a".to_string(), "1. a\n2. b\n3. c".to_string()];
        let mut c = ctx(Scheme::Baseline, Some(Arc::new(ScriptedChat::replay(script))), None).await;
        c.config.n_total = 3;
        c.config.reprompt_on_shortfall = true;
        let h = history(&c.catalog, "u", &["b01"], "b04");
        let (r, audit) = run_user(&c, &h).await.unwrap();
        assert_eq!((r.r_final.len(), audit.len()), (3, 2));
    }

    #[tokio::test]
    async fn query_is_prepended() {
        let server = Arc::new(RecordingChat::new(numbered("s")));
        let mut c = ctx(Scheme::Baseline, Some(server.clone()), None).await;
        c.config.query = Some("gift ideas".into());
        run_user(&c, &history(&c.catalog, "u", &["b01"], "b04")).await.unwrap();
        assert!(server.requests()[0].user.starts_with("User query: gift ideas\n\nUser's purchase history:"));
    }

    #[tokio::test]
    async fn experiment_order_isolation_and_cap() {
        let failing_for_u3 = ScriptedChat::from_fn("sometimes", |req: &ChatRequest| {
            if req.history.iter().any(|t| t.as_str().contains("novel volume 13")) {
                Err(BackendError::protocol("boom"))
            } else {
                Ok("1. x\n2. y".into())
            }
        });
        let mut c = ctx(Scheme::Baseline, Some(Arc::new(failing_for_u3)), None).await;
        let hs: Vec<PurchaseHistory> =
            (0..5).map(|i| history(&c.catalog, &format!("u{i}"), &[&format!("b1{i}")], "b20")).collect();
        c.config.failure_cap = 0.25;
        let out = run_experiment(&c, &hs).await.unwrap();
        assert_eq!(out.records.iter().map(|r| r.user_id.as_str()).collect::<Vec<_>>(), ["u0", "u1", "u2", "u3", "u4"]);
        assert_eq!(out.records.iter().filter(|r| r.is_ok()).count(), 4);
        c.config.failure_cap = 0.1;
        assert!(matches!(run_experiment(&c, &hs).await, Err(PipelineError::FailureCapExceeded { failed: 1, total: 5, .. })));
    }

    #[tokio::test]
    async fn parallelism_does_not_change_records() {
        let strip = |mut out: RunOutput| {
            for r in &mut out.records {
                r.timings = Timings::default();
                for s in r.r_ns.iter_mut().chain(r.r_s.iter_mut()) {
                    s.latency_seconds = 0.0;
                }
            }
            out.records
        };
        let mut c = ctx(Scheme::CatObfDeobf, Some(numbered("s")), Some(numbered("l"))).await;
        let hs: Vec<PurchaseHistory> = (0..8)
            .map(|i| history(&c.catalog, &format!("u{i}"), &[&format!("b{i:02}"), &format!("h{i:02}")], "b29"))
            .collect();
        c.config.parallelism = 1;
        let a = strip(run_experiment(&c, &hs).await.unwrap());
        c.config.parallelism = 8;
        let b = strip(run_experiment(&c, &hs).await.unwrap());
        assert_eq!(a, b);
    }

    #[tokio::test]
    async fn all_transport_failures_report_unreachable() {
        let c = ctx(Scheme::Baseline, Some(Arc::new(ScriptedChat::failing(BackendError::transport("refused")))), None).await;
        let hs = vec![history(&c.catalog, "u", &["b01"], "b04")];
        assert!(matches!(run_experiment(&c, &hs).await, Err(PipelineError::BackendUnreachable { .. })));
    }
}
