use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use url::Url;

use super::classifier::{validate_threshold, TrainedClassifier};
use super::{SensitivityError, SensitivityVerdict};
use crate::catalog::Product;

/// Categories treated as sensitive by the categorical scorer unless configured
/// otherwise.
pub const DEFAULT_SENSITIVE_CATEGORIES: [&str; 3] =
    ["Health & Personal Care", "Health & Household", "Beauty & Personal Care"];

/// Decision threshold for inference-time scorers.
pub const INFERENCE_THRESHOLD: f64 = 0.5;
/// Lower threshold trading precision for recall on the sensitive class.
pub const RECALL_PRIORITY_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Categorical,
    Trained,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    /// Falls back to the model's stored threshold (trained) or 0.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default = "default_sensitive_categories")]
    pub sensitive_categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Url>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
}

pub fn default_sensitive_categories() -> Vec<String> {
    DEFAULT_SENSITIVE_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

fn default_timeout_secs() -> f64 {
    30.0
}

impl ScorerConfig {
    pub fn categorical(categories: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            kind: ScorerKind::Categorical,
            threshold: None,
            sensitive_categories: categories.into_iter().map(Into::into).collect(),
            endpoint: None,
            model_path: None,
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// A ready-to-use sensitivity scorer.
#[derive(Debug, Clone)]
pub enum Scorer {
    Categorical { categories: BTreeSet<String>, threshold: f64 },
    Trained { model: Arc<TrainedClassifier>, threshold: f64 },
    Remote { client: RemoteScorer, threshold: f64 },
}

impl Scorer {
    pub fn categorical(categories: impl IntoIterator<Item = impl Into<String>>, threshold: f64) -> Result<Self, SensitivityError> {
        validate_threshold(threshold)?;
        Ok(Self::Categorical { categories: categories.into_iter().map(Into::into).collect(), threshold })
    }

    pub fn trained(model: Arc<TrainedClassifier>, threshold: Option<f64>) -> Result<Self, SensitivityError> {
        let threshold = threshold.unwrap_or(model.threshold());
        validate_threshold(threshold)?;
        Ok(Self::Trained { model, threshold })
    }

    pub fn from_config(cfg: &ScorerConfig) -> Result<Self, SensitivityError> {
        match cfg.kind {
            ScorerKind::Categorical => {
                Self::categorical(cfg.sensitive_categories.iter().cloned(), cfg.threshold.unwrap_or(INFERENCE_THRESHOLD))
            }
            ScorerKind::Trained => {
                let path = cfg
                    .model_path
                    .as_ref()
                    .ok_or_else(|| SensitivityError::InvalidParam("trained scorer requires model_path".into()))?;
                Self::trained(Arc::new(TrainedClassifier::load(path)?), cfg.threshold)
            }
            ScorerKind::Remote => {
                let endpoint = cfg
                    .endpoint
                    .clone()
                    .ok_or_else(|| SensitivityError::InvalidParam("remote scorer requires endpoint".into()))?;
                let threshold = cfg.threshold.unwrap_or(INFERENCE_THRESHOLD);
                validate_threshold(threshold)?;
                Ok(Self::Remote {
                    client: RemoteScorer::new(endpoint, Duration::from_secs_f64(cfg.timeout_secs))?,
                    threshold,
                })
            }
        }
    }

    pub fn kind(&self) -> ScorerKind {
        match self {
            Self::Categorical { .. } => ScorerKind::Categorical,
            Self::Trained { .. } => ScorerKind::Trained,
            Self::Remote { .. } => ScorerKind::Remote,
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Self::Categorical { threshold, .. } | Self::Trained { threshold, .. } | Self::Remote { threshold, .. } => *threshold,
        }
    }

    /// Scores products in order. A remote failure is returned as an error and
    /// never defaulted to "nonsensitive".
    pub async fn score_batch(&self, products: &[Product]) -> Result<Vec<SensitivityVerdict>, SensitivityError> {
        let threshold = self.threshold();
        let probabilities: Vec<f64> = match self {
            Self::Categorical { categories, .. } => products
                .iter()
                .map(|p| if categories.contains(&p.main_category) { 1.0 } else { 0.0 })
                .collect(),
            Self::Trained { model, .. } => products.iter().map(|p| model.probability(p.canonical_text().as_str())).collect(),
            Self::Remote { client, .. } => {
                if products.is_empty() {
                    Vec::new()
                } else {
                    let texts: Vec<String> = products.iter().map(|p| p.canonical_text().0).collect();
                    client.score_texts(&texts).await?
                }
            }
        };
        Ok(products
            .iter()
            .zip(probabilities)
            .map(|(p, prob)| SensitivityVerdict::new(p.id.clone(), prob, threshold))
            .collect())
    }

    pub async fn score(&self, product: &Product) -> Result<SensitivityVerdict, SensitivityError> {
        Ok(self.score_batch(std::slice::from_ref(product)).await?.remove(0))
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    probabilities: Vec<f64>,
}

/// Client for `POST {endpoint}/score`.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    endpoint: Url,
    http: reqwest::Client,
}

impl RemoteScorer {
    pub fn new(endpoint: Url, timeout: Duration) -> Result<Self, SensitivityError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| SensitivityError::Transport { message: e.to_string(), retry_safe: false })?;
        Ok(Self { endpoint, http })
    }

    pub fn endpoint(&self) -> &Url {
        &self.endpoint
    }

    pub async fn score_texts(&self, texts: &[String]) -> Result<Vec<f64>, SensitivityError> {
        let url = crate::join_endpoint(&self.endpoint, "score");
        let resp = self
            .http
            .post(url)
            .json(&ScoreRequest { texts })
            .send()
            .await
            .map_err(|e| SensitivityError::Transport { message: e.to_string(), retry_safe: true })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(SensitivityError::Transport {
                message: format!("score endpoint returned {status}"),
                retry_safe: status.is_server_error(),
            });
        }
        let body: ScoreResponse = resp
            .json()
            .await
            .map_err(|e| SensitivityError::Protocol(format!("malformed /score response: {e}")))?;
        if body.probabilities.len() != texts.len() {
            return Err(SensitivityError::Protocol(format!(
                "/score returned {} probabilities for {} texts",
                body.probabilities.len(),
                texts.len()
            )));
        }
        if let Some(bad) = body.probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SensitivityError::Protocol(format!("/score probability {bad} outside [0,1]")));
        }
        Ok(body.probabilities)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn categorical_scorer() {
        let s = Scorer::from_config(&ScorerConfig::categorical(DEFAULT_SENSITIVE_CATEGORIES)).unwrap();
        let v = s.score(&Product::new("a", "Health & Household", "Bandages")).await.unwrap();
        assert_eq!((v.probability, v.is_sensitive), (1.0, true));
        let v = s.score(&Product::new("b", "Electronics", "Cable")).await.unwrap();
        assert_eq!((v.probability, v.is_sensitive), (0.0, false));
    }

    #[test]
    fn config_requires_kind_specific_fields() {
        let mut cfg = ScorerConfig::categorical(["x"]);
        cfg.kind = ScorerKind::Trained;
        assert!(Scorer::from_config(&cfg).is_err());
        cfg.kind = ScorerKind::Remote;
        assert!(Scorer::from_config(&cfg).is_err());
        cfg.kind = ScorerKind::Categorical;
        cfg.threshold = Some(1.0);
        assert!(Scorer::from_config(&cfg).is_err());
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: ScorerConfig = serde_json::from_str(r#"{"kind":"categorical"}"#).unwrap();
        assert_eq!(cfg.sensitive_categories, default_sensitive_categories());
        assert_eq!(cfg.threshold, None);
    }
}
