//! Text embeddings and an exact cosine-similarity index over the catalog.

mod embed;
mod index;

use serde::{Deserialize, Serialize};

pub use embed::{hash_embed, EmbeddingProvider, ProviderConfig, ProviderKind, DEFAULT_DIMENSION};
pub use index::{build_index, IndexRow, Neighbor, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("non-finite embedding component")]
    NonFinite,
    #[error("index is empty")]
    EmptyIndex,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("embedding transport failure: {0}")]
    Transport(String),
    #[error("embedding protocol error: {0}")]
    Protocol(String),
    #[error("index file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

/// `u·v / (‖u‖‖v‖)`, clamped to [-1, 1].
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64, RetrievalError> {
    if u.dimension() != v.dimension() {
        return Err(RetrievalError::Dimension { expected: u.dimension(), got: v.dimension() });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    let c = dot / (nu * nv);
    if !c.is_finite() {
        return Err(RetrievalError::NonFinite);
    }
    Ok(c.clamp(-1.0, 1.0))
}
