use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{RunContext, RunOutput, UserRunRecord, UserStatus};
use super::{PipelineError, Scheme};
use crate::gateway::TEMPLATE_VERSION;
use crate::sensitivity::{default_sensitive_categories, ScorerKind};

pub const RUN_FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_FILE: &str = "records.jsonl";
const SERVER_AUDIT_FILE: &str = "audit/server.jsonl";
const LOCAL_AUDIT_FILE: &str = "audit/local.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leg {
    Server,
    Local,
}

/// A prompt/response pair as exchanged with one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub user_id: String,
    pub leg: Leg,
    pub attempt: usize,
    pub system: String,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The payload holds a flagged or ground-truth-sensitive product.
    pub contains_sensitive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSummary {
    pub kind: ScorerKind,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub server_file: String,
    pub local_file: String,
    pub server_payloads_contain_sensitive: bool,
    /// Local prompts carry sensitive history by design and stay on this machine.
    pub local_payloads_contain_sensitive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub scheme: Scheme,
    pub config_hash: String,
    pub seed: u64,
    pub n_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSummary>,
    pub prompt_template_version: u32,
    pub catalog_hash: String,
    pub catalog_size: usize,
    pub category_universe: Vec<String>,
    pub sensitive_categories: Vec<String>,
    pub embedding_provider: String,
    pub embedding_dimension: usize,
    pub retrieval_corpus: String,
    pub users: usize,
    pub failed_users: usize,
    pub failures_by_category: BTreeMap<String, usize>,
    pub audit: AuditSummary,
}

impl RunManifest {
    pub fn new(ctx: &RunContext, records: &[UserRunRecord], audit: &[AuditEntry]) -> Self {
        let cfg = &ctx.config;
        let mut failures_by_category = BTreeMap::new();
        for r in records {
            if let UserStatus::Failed { category, .. } = &r.status {
                *failures_by_category.entry(category.clone()).or_insert(0) += 1;
            }
        }
        let sensitive_categories =
            cfg.scorer.as_ref().map(|s| s.sensitive_categories.clone()).unwrap_or_else(default_sensitive_categories);
        Self {
            format_version: RUN_FORMAT_VERSION,
            run_id: cfg.effective_run_id(),
            scheme: cfg.scheme,
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            n_total: cfg.n_total,
            server_backend: ctx.server.as_ref().map(|c| c.identity()),
            local_backend: ctx.local.as_ref().map(|c| c.identity()),
            scorer: ctx.scorer.as_ref().map(|s| ScorerSummary { kind: s.kind(), threshold: s.threshold() }),
            prompt_template_version: TEMPLATE_VERSION,
            catalog_hash: ctx.catalog.content_hash(),
            catalog_size: ctx.catalog.len(),
            category_universe: ctx.catalog.category_universe().to_vec(),
            sensitive_categories,
            embedding_provider: ctx.provider.identity(),
            embedding_dimension: ctx.provider.dimension(),
            retrieval_corpus: "full_catalog".into(),
            users: records.len(),
            failed_users: failures_by_category.values().sum(),
            failures_by_category,
            audit: AuditSummary {
                server_file: SERVER_AUDIT_FILE.into(),
                local_file: LOCAL_AUDIT_FILE.into(),
                server_payloads_contain_sensitive: audit.iter().any(|a| a.leg == Leg::Server && a.contains_sensitive),
                local_payloads_contain_sensitive: audit.iter().any(|a| a.leg == Leg::Local && a.contains_sensitive),
            },
        }
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| PipelineError::Archive(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes manifest, records and audit logs under `dir`; returns the paths.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir.join("audit"))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = serde_json::to_string_pretty(&out.manifest).map_err(|e| PipelineError::Archive(e.to_string()))?;
    manifest.push('\n');
    fs::write(&manifest_path, manifest)?;
    let records_path = dir.join(RECORDS_FILE);
    write_jsonl(&records_path, &out.records)?;
    let server_path = dir.join(SERVER_AUDIT_FILE);
    write_jsonl(&server_path, out.audit.iter().filter(|a| a.leg == Leg::Server))?;
    let local_path = dir.join(LOCAL_AUDIT_FILE);
    write_jsonl(&local_path, out.audit.iter().filter(|a| a.leg == Leg::Local))?;
    Ok(vec![manifest_path, records_path, server_path, local_path])
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArchive {
    pub manifest: RunManifest,
    pub records: Vec<UserRunRecord>,
}

pub fn load_run(dir: &Path) -> Result<RunArchive, PipelineError> {
    let raw = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: RunManifest =
        serde_json::from_str(&raw).map_err(|e| PipelineError::Archive(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    if manifest.format_version != RUN_FORMAT_VERSION {
        return Err(PipelineError::Archive(format!("unsupported run format version {}", manifest.format_version)));
    }
    let mut records = Vec::new();
    for (i, line) in BufReader::new(File::open(dir.join(RECORDS_FILE))?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Archive(format!("{RECORDS_FILE} line {}: {e}", i + 1)))?,
        );
    }
    Ok(RunArchive { manifest, records })
}
