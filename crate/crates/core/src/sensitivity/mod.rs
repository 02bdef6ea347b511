//! Product sensitivity scoring and history splitting.
//!
//! Three scorers share one contract: a categorical rule over `main_category`,
//! a locally trained logistic bag-of-tokens classifier, and a client for a
//! remote `/score` service. A product is sensitive iff its probability is
//! strictly above the scorer's threshold.

mod classifier;
mod focal;
mod metrics;
mod scorer;
mod train;

use serde::{Deserialize, Serialize};

use crate::catalog::{Product, PurchaseHistory};

pub use classifier::{tokenize, TrainedClassifier, TrainingMetadata, MAX_TOKENS, MODEL_MAGIC, MODEL_VERSION};
pub use focal::{
    class_weights, focal_grad_logit, focal_loss, focal_term, sigmoid, ClassWeights, FocalLossParams, DEFAULT_GAMMA, PROB_EPS,
};
pub use metrics::{evaluate_classifier, ClassifierMetrics, Confusion};
pub use scorer::{
    default_sensitive_categories, RemoteScorer, Scorer, ScorerConfig, ScorerKind, DEFAULT_SENSITIVE_CATEGORIES,
    INFERENCE_THRESHOLD, RECALL_PRIORITY_THRESHOLD,
};
pub use train::{
    focal_gradient, focal_objective, split_indices, train_classifier, EncodedSample, SplitFractions, TrainConfig, TrainHyper,
    TrainingOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum SensitivityError {
    #[error("degenerate class distribution: {0}")]
    DegenerateClass(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scorer transport failure (retry_safe={retry_safe}): {message}")]
    Transport { message: String, retry_safe: bool },
    #[error("scorer protocol error: {0}")]
    Protocol(String),
}

impl SensitivityError {
    pub fn is_retry_safe(&self) -> bool {
        matches!(self, Self::Transport { retry_safe: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityVerdict {
    pub product_id: String,
    pub probability: f64,
    pub is_sensitive: bool,
}

impl SensitivityVerdict {
    pub fn new(product_id: String, probability: f64, threshold: f64) -> Self {
        Self { product_id, probability, is_sensitive: probability > threshold }
    }
}

/// Order-preserving partition of a history's items.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HistorySplit {
    pub sensitive: Vec<Product>,
    pub nonsensitive: Vec<Product>,
    pub verdicts: Vec<SensitivityVerdict>,
}

/// Partitions `items` by index-aligned verdicts.
pub fn partition(items: &[Product], verdicts: Vec<SensitivityVerdict>) -> Result<HistorySplit, SensitivityError> {
    if items.len() != verdicts.len() {
        return Err(SensitivityError::Shape { expected: items.len(), got: verdicts.len() });
    }
    let (sensitive, nonsensitive): (Vec<_>, Vec<_>) = items.iter().zip(&verdicts).partition(|(_, v)| v.is_sensitive);
    Ok(HistorySplit {
        sensitive: sensitive.into_iter().map(|(p, _)| p.clone()).collect(),
        nonsensitive: nonsensitive.into_iter().map(|(p, _)| p.clone()).collect(),
        verdicts,
    })
}

pub async fn split_history(h: &PurchaseHistory, scorer: &Scorer) -> Result<HistorySplit, SensitivityError> {
    let verdicts = scorer.score_batch(&h.items).await?;
    partition(&h.items, verdicts)
}
