//! Chat-completion backends, prompt templates and response parsing.
//!
//! Every backend implements [`ChatClient`]. Network backends speak the
//! common `/v1/chat/completions` JSON shape; the two mock kinds serve offline
//! runs: a scripted one replaying fixed text and a retrieval one that answers
//! from the catalog index.

mod http;
mod labeling;
mod mock;
mod parse;
mod prompt;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::catalog::{Catalog, ProductText};
use crate::retrieval::{EmbeddingProvider, VectorIndex};

pub use http::{chat_body, HttpChatClient, Secret};
pub use labeling::{assign_label_via_llm, assign_score_via_llm, parse_label, parse_score, LabelError};
pub use mock::{RecordingChat, RetrievalChat, ScriptedChat};
pub use parse::{format_numbered_list, parse_numbered_list, ParseError, ParsedList, RecommendationEntry};
pub use prompt::{numbered_history, render_prompt, PromptTemplate, RenderedPrompt, TemplateError, TEMPLATE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Transport,
    Protocol,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind:?} backend error: {message}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn transport(message: impl Into<String>) -> Self {
        Self { kind: BackendErrorKind::Transport, message: message.into() }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Self { kind: BackendErrorKind::Protocol, message: message.into() }
    }

    pub fn empty(message: impl Into<String>) -> Self {
        Self { kind: BackendErrorKind::Empty, message: message.into() }
    }
}

/// One chat exchange. `count` and `history` repeat what the prompt already
/// says so content-aware mocks need not parse prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub count: usize,
    pub history: Vec<ProductText>,
}

#[async_trait]
pub trait ChatClient: Send + Sync {
    async fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;

    /// Stable, secret-free description for manifests.
    fn identity(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub latency_seconds: f64,
}

/// Runs one completion and measures its wall-clock latency.
pub async fn complete(client: &dyn ChatClient, req: &ChatRequest) -> Result<Completion, BackendError> {
    let start = Instant::now();
    let text = client.complete(req).await?;
    Ok(Completion { text, latency_seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Server,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationSet {
    pub entries: Vec<RecommendationEntry>,
    pub provenance: Provenance,
    pub raw_response: String,
    pub latency_seconds: f64,
    pub shortfall: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteApi,
    LocalEndpoint,
    MockRetrieval,
    MockScripted,
}

impl BackendKind {
    pub fn is_network(self) -> bool {
        matches!(self, Self::RemoteApi | Self::LocalEndpoint)
    }
}

pub const DEFAULT_MAX_OUTPUT_ITEMS: usize = 50;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<Url>,
    #[serde(default)]
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_output_items")]
    pub max_output_items: usize,
    /// mock_scripted: responses replayed in order, the last one repeating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<String>>,
    /// mock_scripted: a file whose whole content is the response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    /// mock_retrieval: only suggest products sharing a history item's category.
    #[serde(default)]
    pub same_category: bool,
}

fn default_timeout_secs() -> f64 {
    60.0
}

fn default_max_output_items() -> usize {
    DEFAULT_MAX_OUTPUT_ITEMS
}

impl fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendConfig")
            .field("kind", &self.kind)
            .field("base_url", &self.base_url.as_ref().map(Url::as_str))
            .field("model_name", &self.model_name)
            .field("auth_token_env", &self.auth_token_env)
            .field("timeout_secs", &self.timeout_secs)
            .field("max_output_items", &self.max_output_items)
            .field("same_category", &self.same_category)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingToken(String),
    #[error("reading fixture {path}: {source}")]
    Fixture { path: PathBuf, source: std::io::Error },
}

impl BackendConfig {
    pub fn mock(kind: BackendKind) -> Self {
        Self {
            kind,
            base_url: None,
            model_name: String::new(),
            auth_token_env: None,
            timeout_secs: default_timeout_secs(),
            max_output_items: DEFAULT_MAX_OUTPUT_ITEMS,
            script: None,
            fixture: None,
            same_category: false,
        }
    }

    pub fn network(kind: BackendKind, base_url: Url, model_name: impl Into<String>) -> Self {
        Self { base_url: Some(base_url), model_name: model_name.into(), ..Self::mock(kind) }
    }

    pub fn validate(&self) -> Result<(), BackendConfigError> {
        let invalid = |m: &str| Err(BackendConfigError::Invalid(format!("{:?} backend: {m}", self.kind)));
        if self.kind.is_network() != self.base_url.is_some() {
            return invalid(if self.kind.is_network() { "base_url is required" } else { "base_url is not allowed" });
        }
        if self.max_output_items == 0 {
            return invalid("max_output_items must be positive");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return invalid("timeout_secs must be positive");
        }
        if self.kind == BackendKind::MockScripted && self.script.is_none() == self.fixture.is_none() {
            return invalid("exactly one of script or fixture is required");
        }
        if self.kind != BackendKind::MockScripted && (self.script.is_some() || self.fixture.is_some()) {
            return invalid("script/fixture only apply to mock_scripted");
        }
        if matches!(&self.script, Some(s) if s.is_empty()) {
            return invalid("script is empty");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// What the retrieval mock needs to answer from the catalog.
#[derive(Debug, Clone)]
pub struct RetrievalContext {
    pub catalog: Arc<Catalog>,
    pub index: Arc<VectorIndex>,
    pub provider: EmbeddingProvider,
}

/// Instantiates the configured backend. Tokens are read from the environment
/// here and live only inside the client.
pub fn build_backend(cfg: &BackendConfig, retrieval: Option<&RetrievalContext>) -> Result<Arc<dyn ChatClient>, BackendConfigError> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::RemoteApi | BackendKind::LocalEndpoint => {
            let token = match &cfg.auth_token_env {
                Some(var) => Some(Secret::new(
                    std::env::var(var).map_err(|_| BackendConfigError::MissingToken(var.clone()))?,
                )),
                None => None,
            };
            let base = cfg.base_url.clone().expect("validated");
            let client = HttpChatClient::new(base, cfg.model_name.clone(), token, cfg.timeout())
                .map_err(|e| BackendConfigError::Invalid(e.to_string()))?;
            Ok(Arc::new(client))
        }
        BackendKind::MockScripted => {
            let script = match (&cfg.script, &cfg.fixture) {
                (Some(s), _) => s.clone(),
                (None, Some(path)) => vec![std::fs::read_to_string(path)
                    .map_err(|source| BackendConfigError::Fixture { path: path.clone(), source })?],
                (None, None) => unreachable!("validated"),
            };
            Ok(Arc::new(ScriptedChat::replay(script)))
        }
        BackendKind::MockRetrieval => {
            let ctx = retrieval.ok_or_else(|| BackendConfigError::Invalid("mock_retrieval needs a catalog index".into()))?;
            Ok(Arc::new(RetrievalChat::new(ctx.clone(), cfg.same_category)))
        }
    }
}
