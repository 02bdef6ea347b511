use std::time::Duration;

use serde::{Deserialize, Serialize};
use url::Url;

use super::{Embedding, RetrievalError};

pub const DEFAULT_DIMENSION: usize = 384;
const REMOTE_BATCH: usize = 64;
const EMPTY_FEATURE: &str = "\u{0}empty";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    DeterministicHash,
    RemoteEndpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<Url>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

fn default_timeout_secs() -> f64 {
    30.0
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::DeterministicHash, dimension: DEFAULT_DIMENSION, endpoint: None, timeout_secs: 30.0 }
    }
}

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Hash { dimension: usize },
    Remote { endpoint: Url, dimension: usize, http: reqwest::Client },
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl EmbeddingProvider {
    pub fn hash(dimension: usize) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::Invalid("dimension must be positive".into()));
        }
        Ok(Self::Hash { dimension })
    }

    pub fn remote(endpoint: Url, dimension: usize, timeout: Duration) -> Result<Self, RetrievalError> {
        if dimension == 0 {
            return Err(RetrievalError::Invalid("dimension must be positive".into()));
        }
        let http = reqwest::Client::builder().timeout(timeout).build().map_err(|e| RetrievalError::Transport(e.to_string()))?;
        Ok(Self::Remote { endpoint, dimension, http })
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, RetrievalError> {
        match cfg.kind {
            ProviderKind::DeterministicHash => Self::hash(cfg.dimension),
            ProviderKind::RemoteEndpoint => {
                let endpoint = cfg
                    .endpoint
                    .clone()
                    .ok_or_else(|| RetrievalError::Invalid("remote embedding provider requires endpoint".into()))?;
                Self::remote(endpoint, cfg.dimension, Duration::from_secs_f64(cfg.timeout_secs))
            }
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Hash { dimension } | Self::Remote { dimension, .. } => *dimension,
        }
    }

    /// Stable description for run manifests.
    pub fn identity(&self) -> String {
        match self {
            Self::Hash { dimension } => format!("deterministic_hash/char3-fnv1a/d{dimension}"),
            Self::Remote { endpoint, dimension, .. } => format!("remote_endpoint/{endpoint}/d{dimension}"),
        }
    }

    /// Order-preserving batch embedding.
    pub async fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, RetrievalError> {
        if texts.is_empty() {
            return Err(RetrievalError::Invalid("nothing to embed".into()));
        }
        match self {
            Self::Hash { dimension } => Ok(texts.iter().map(|t| hash_embed(t, *dimension)).collect()),
            Self::Remote { endpoint, dimension, http } => {
                let url = crate::join_endpoint(endpoint, "embed");
                let mut out = Vec::with_capacity(texts.len());
                for chunk in texts.chunks(REMOTE_BATCH) {
                    out.extend(remote_embed(http, &url, chunk, *dimension).await?);
                }
                Ok(out)
            }
        }
    }

    pub async fn embed_one(&self, text: &str) -> Result<Embedding, RetrievalError> {
        Ok(self.embed(&[text.to_string()]).await?.remove(0))
    }
}

async fn remote_embed(http: &reqwest::Client, url: &Url, texts: &[String], dimension: usize) -> Result<Vec<Embedding>, RetrievalError> {
    let resp = http
        .post(url.clone())
        .json(&EmbedRequest { texts })
        .send()
        .await
        .map_err(|e| RetrievalError::Transport(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        return Err(RetrievalError::Transport(format!("embed endpoint returned {status}")));
    }
    let body: EmbedResponse = resp.json().await.map_err(|e| RetrievalError::Protocol(format!("malformed /embed response: {e}")))?;
    if body.embeddings.len() != texts.len() {
        return Err(RetrievalError::Protocol(format!(
            "/embed returned {} vectors for {} texts",
            body.embeddings.len(),
            texts.len()
        )));
    }
    body.embeddings
        .into_iter()
        .map(|v| {
            if v.len() != dimension {
                Err(RetrievalError::Dimension { expected: dimension, got: v.len() })
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(RetrievalError::NonFinite)
            } else {
                Ok(Embedding(v))
            }
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn add_feature(v: &mut [f64], feature: &str) {
    let h = fnv1a(feature.as_bytes());
    let bucket = (h % v.len() as u64) as usize;
    v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
}

/// Signed feature hashing of character 3-grams of each `#token#`, L2-normalized.
/// Text without tokens hashes a fixed sentinel feature, so the result is
/// never the zero vector.
pub fn hash_embed(text: &str, dimension: usize) -> Embedding {
    let mut v = vec![0.0; dimension];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let padded: Vec<char> = format!("#{token}#").chars().collect();
        for gram in padded.windows(3) {
            add_feature(&mut v, &gram.iter().collect::<String>());
        }
    }
    if v.iter().all(|&x| x == 0.0) {
        add_feature(&mut v, EMPTY_FEATURE);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Embedding(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::cosine;
    use proptest::prelude::*;

    #[test]
    fn hash_is_deterministic_and_unit_norm() {
        let a = hash_embed("Organic green tea, 100 bags", 384);
        assert_eq!(a, hash_embed("Organic green tea, 100 bags", 384));
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.dimension(), 384);
    }

    #[test]
    fn empty_text_embeds_deterministically() {
        let a = hash_embed("", 16);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a, hash_embed("  ", 16));
    }

    #[test]
    fn similar_texts_are_closer_than_unrelated() {
        let d = DEFAULT_DIMENSION;
        let q = hash_embed("wireless bluetooth headphones", d);
        let near = hash_embed("bluetooth wireless headphone", d);
        let far = hash_embed("stainless kitchen knife", d);
        assert!(cosine(&q, &near).unwrap() > cosine(&q, &far).unwrap());
    }

    #[tokio::test]
    async fn empty_batch_rejected() {
        let p = EmbeddingProvider::hash(8).unwrap();
        assert!(p.embed(&[]).await.is_err());
        assert!(EmbeddingProvider::hash(0).is_err());
    }

    proptest! {
        #[test]
        fn unrelated_word_soups_are_not_identical(
            a in prop::collection::vec("[a-m]{3,8}", 1..8),
            b in prop::collection::vec("[n-z]{3,8}", 1..8),
        ) {
            let u = hash_embed(&a.join(" "), DEFAULT_DIMENSION);
            let v = hash_embed(&b.join(" "), DEFAULT_DIMENSION);
            prop_assert!(cosine(&u, &v).unwrap() < 1.0);
            prop_assert!((u.norm() - 1.0).abs() < 1e-9);
        }
    }
}
