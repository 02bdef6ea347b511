//! Experiment orchestration: split, allocate, prompt both recommenders,
//! merge, resolve and time.

mod archive;
mod run;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{BackendConfig, BackendErrorKind};
use crate::sensitivity::ScorerConfig;

pub use archive::{load_run, write_run, AuditEntry, Leg, RunArchive, RunManifest, RUN_FORMAT_VERSION};
pub use run::{
    run_experiment, run_user, FinalRecommendation, LeakageEntry, RunContext, RunOutput, Timings, UserRunRecord, UserStatus,
    TOP_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    OnlyLocal,
    CatObfOnly,
    CatObfDeobf,
    BertObfOnly,
    BertObfDeobf,
}

impl Scheme {
    /// Report order.
    pub const ALL: [Scheme; 6] =
        [Self::Baseline, Self::OnlyLocal, Self::CatObfOnly, Self::CatObfDeobf, Self::BertObfOnly, Self::BertObfDeobf];

    pub fn obfuscates(self) -> bool {
        !matches!(self, Self::Baseline | Self::OnlyLocal)
    }

    pub fn deobfuscates(self) -> bool {
        matches!(self, Self::CatObfDeobf | Self::BertObfDeobf)
    }

    pub fn needs_server(self) -> bool {
        self != Self::OnlyLocal
    }

    pub fn needs_local(self) -> bool {
        self.deobfuscates() || self == Self::OnlyLocal
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::OnlyLocal => "Only Local",
            Self::CatObfOnly => "Categorical Obf Only",
            Self::CatObfDeobf => "Categorical Obf + Deobf",
            Self::BertObfOnly => "BERT Obf Only",
            Self::BertObfDeobf => "BERT Obf + Deobf",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::OnlyLocal => "only_local",
            Self::CatObfOnly => "cat_obf_only",
            Self::CatObfDeobf => "cat_obf_deobf",
            Self::BertObfOnly => "bert_obf_only",
            Self::BertObfDeobf => "bert_obf_deobf",
        }
    }

    /// The obfuscation-only counterpart of a deobfuscating scheme.
    pub fn obf_only_counterpart(self) -> Option<Scheme> {
        match self {
            Self::CatObfDeobf => Some(Self::CatObfOnly),
            Self::BertObfDeobf => Some(Self::BertObfOnly),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(#[from] crate::gateway::BackendConfigError),
    #[error("scorer: {0}")]
    Scorer(#[from] crate::sensitivity::SensitivityError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error("{failed} of {total} users failed, above the configured cap")]
    FailureCapExceeded { failed: usize, total: usize, output: Box<RunOutput> },
    #[error("{failed} of {total} users failed on an unreachable backend")]
    BackendUnreachable { failed: usize, total: usize, output: Box<RunOutput> },
    #[error("sensitive product {0} reached the server payload")]
    PrivacyViolation(String),
    #[error("run archive: {0}")]
    Archive(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_N_TOTAL: usize = 10;
pub const DEFAULT_FAILURE_CAP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub scheme: Scheme,
    #[serde(default = "default_n_total")]
    pub n_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_backend: Option<BackendConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Largest tolerated fraction of failed users.
    #[serde(default = "default_failure_cap")]
    pub failure_cap: f64,
    /// Optional user query placed ahead of the history in the user prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    /// Issue one more request when a leg returns fewer items than asked.
    #[serde(default)]
    pub reprompt_on_shortfall: bool,
}

fn default_n_total() -> usize {
    DEFAULT_N_TOTAL
}

fn default_parallelism() -> usize {
    4
}

fn default_failure_cap() -> f64 {
    DEFAULT_FAILURE_CAP
}

impl ExperimentConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            run_id: None,
            scheme,
            n_total: DEFAULT_N_TOTAL,
            scorer: None,
            server_backend: None,
            local_backend: None,
            seed: 0,
            parallelism: default_parallelism(),
            failure_cap: DEFAULT_FAILURE_CAP,
            query: None,
            reprompt_on_shortfall: false,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n_total < 1 {
            return bad("n_total must be at least 1".into());
        }
        if self.parallelism < 1 {
            return bad("parallelism must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.failure_cap) {
            return bad("failure_cap must lie in [0, 1]".into());
        }
        if self.scheme.obfuscates() && self.scorer.is_none() {
            return bad(format!("{} requires a scorer", self.scheme));
        }
        for (needed, backend, name) in [
            (self.scheme.needs_server(), &self.server_backend, "server_backend"),
            (self.scheme.needs_local(), &self.local_backend, "local_backend"),
        ] {
            match (needed, backend) {
                (true, None) => return bad(format!("{} requires {name}", self.scheme)),
                (true, Some(b)) => {
                    b.validate()?;
                    if self.n_total > b.max_output_items {
                        return bad(format!("n_total {} exceeds {name}.max_output_items {}", self.n_total, b.max_output_items));
                    }
                }
                (false, _) => {}
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. Backend configs name the token
    /// variable, never its value.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn effective_run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("{}-{}", self.scheme, &self.config_hash()[..12]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub n_ns: usize,
    pub n_s: usize,
}

/// Proportional split of `n_total` recommendations. The sensitive share is
/// rounded half up, and is at least 1 whenever any sensitive item exists.
pub fn allocate(n_total: usize, count_s: usize, count_ns: usize) -> Result<Allocation, PipelineError> {
    if n_total < 1 {
        return Err(PipelineError::Config("n_total must be at least 1".into()));
    }
    let total = count_s + count_ns;
    if total == 0 {
        return Err(PipelineError::Config("history is empty".into()));
    }
    let mut n_s = (2 * n_total * count_s + total) / (2 * total);
    if count_s > 0 && n_s == 0 {
        n_s = 1;
    }
    Ok(Allocation { n_ns: n_total - n_s, n_s })
}

/// Extra latency over a server-only system when both legs run concurrently.
pub fn timing_extra(t_obf: f64, t_rec: f64, t_deobf: f64) -> f64 {
    t_obf + t_rec.max(t_deobf) - t_rec
}

/// Failure category names used in records and summaries.
pub fn backend_category(kind: BackendErrorKind) -> &'static str {
    match kind {
        BackendErrorKind::Transport => "transport",
        BackendErrorKind::Protocol => "protocol",
        BackendErrorKind::Empty => "empty",
    }
}
