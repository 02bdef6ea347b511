//! Logistic bag-of-tokens sensitivity classifier and its model file.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! magic     b"PRSC"
//! version   u32
//! threshold f64
//! count     u32
//! count x { token_len u32, token utf-8 bytes, weight f64 }
//! bias      f64
//! meta_len  u32, training metadata as JSON (meta_len bytes)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::focal::{sigmoid, ClassWeights};
use super::SensitivityError;

pub const MODEL_MAGIC: [u8; 4] = *b"PRSC";
pub const MODEL_VERSION: u32 = 1;

/// Inputs are truncated to this many tokens.
pub const MAX_TOKENS: usize = 256;

/// Lowercased alphanumeric tokens, truncated to [`MAX_TOKENS`].
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(MAX_TOKENS)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub best_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    pub class_weights: ClassWeights,
    pub best_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    vocabulary: BTreeMap<String, usize>,
    weights: Vec<f64>,
    bias: f64,
    threshold: f64,
    metadata: TrainingMetadata,
}

impl TrainedClassifier {
    /// Builds a zero-initialized model over a vocabulary. Tokens are indexed
    /// in lexicographic order.
    pub(crate) fn zeroed(tokens: impl IntoIterator<Item = String>, threshold: f64, metadata: TrainingMetadata) -> Self {
        let mut vocab: Vec<String> = tokens.into_iter().collect();
        vocab.sort();
        vocab.dedup();
        let vocabulary: BTreeMap<String, usize> = vocab.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        let weights = vec![0.0; vocabulary.len()];
        Self { vocabulary, weights, bias: 0.0, threshold, metadata }
    }

    pub fn from_parts(
        entries: Vec<(String, f64)>,
        bias: f64,
        threshold: f64,
        metadata: TrainingMetadata,
    ) -> Result<Self, SensitivityError> {
        validate_threshold(threshold)?;
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(SensitivityError::ModelFormat("duplicate vocabulary token".into()));
        }
        if !bias.is_finite() || entries.iter().any(|(_, w)| !w.is_finite()) {
            return Err(SensitivityError::ModelFormat("non-finite parameter".into()));
        }
        let vocabulary = entries.iter().enumerate().map(|(i, (t, _))| (t.clone(), i)).collect();
        let weights = entries.into_iter().map(|(_, w)| w).collect();
        Ok(Self { vocabulary, weights, bias, threshold, metadata })
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub(crate) fn set_bias(&mut self, bias: f64) {
        self.bias = bias;
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn metadata(&self) -> &TrainingMetadata {
        &self.metadata
    }

    pub(crate) fn metadata_mut(&mut self) -> &mut TrainingMetadata {
        &mut self.metadata
    }

    /// Sorted, distinct vocabulary indices present in `text`.
    pub fn features(&self, text: &str) -> Vec<usize> {
        let mut idx: Vec<usize> = tokenize(text).iter().filter_map(|t| self.vocabulary.get(t).copied()).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    pub fn logit_of(&self, features: &[usize]) -> f64 {
        self.bias + features.iter().map(|&i| self.weights[i]).sum::<f64>()
    }

    /// Probability that `text` is sensitive, in (0,1).
    pub fn probability(&self, text: &str) -> f64 {
        sigmoid(self.logit_of(&self.features(text)))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SensitivityError> {
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&self.threshold.to_le_bytes())?;
        w.write_all(&(self.vocabulary.len() as u32).to_le_bytes())?;
        for (token, &i) in &self.vocabulary {
            w.write_all(&(token.len() as u32).to_le_bytes())?;
            w.write_all(token.as_bytes())?;
            w.write_all(&self.weights[i].to_le_bytes())?;
        }
        w.write_all(&self.bias.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| SensitivityError::ModelFormat(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SensitivityError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MODEL_MAGIC {
            return Err(SensitivityError::ModelFormat("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(SensitivityError::ModelFormat(format!("unsupported model version {version}")));
        }
        let threshold = read_f64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let token = String::from_utf8(buf).map_err(|_| SensitivityError::ModelFormat("token is not utf-8".into()))?;
            entries.push((token, read_f64(&mut r)?));
        }
        let bias = read_f64(&mut r)?;
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| SensitivityError::ModelFormat(e.to_string()))?;
        Self::from_parts(entries, bias, threshold, metadata)
    }

    pub fn save(&self, path: &Path) -> Result<(), SensitivityError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SensitivityError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn validate_threshold(t: f64) -> Result<(), SensitivityError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(SensitivityError::InvalidParam(format!("threshold must lie strictly in (0,1), got {t}")))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> TrainingMetadata {
        TrainingMetadata {
            epochs: 1,
            best_epoch: 1,
            learning_rate: 0.1,
            weight_decay: 0.0,
            batch_size: 4,
            seed: 0,
            gamma: 2.0,
            class_weights: ClassWeights::UNIT,
            best_f1: 1.0,
        }
    }

    #[test]
    fn tokenize_lowercases_and_truncates() {
        assert_eq!(tokenize("Insulin-Pen, 2x PACK!"), ["insulin", "pen", "2x", "pack"]);
        let long = "a ".repeat(400);
        assert_eq!(tokenize(&long).len(), MAX_TOKENS);
    }

    #[test]
    fn model_file_roundtrip() {
        let m = TrainedClassifier::from_parts(vec![("zeta".into(), -0.5), ("alpha".into(), 1.25)], 0.1, 0.3, meta()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PRSC");
        let back = TrainedClassifier::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.features("ALPHA beta alpha"), vec![0]);
    }

    #[test]
    fn corrupt_model_rejected() {
        assert!(TrainedClassifier::read_from(&b"NOPE\x01\0\0\0"[..]).is_err());
        let m = TrainedClassifier::from_parts(vec![], 0.0, 0.5, meta()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(TrainedClassifier::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn probability_is_sigmoid_of_linear_score() {
        let m = TrainedClassifier::from_parts(vec![("insulin".into(), 3.0)], -1.0, 0.5, meta()).unwrap();
        assert!((m.probability("insulin pen") - sigmoid(2.0)).abs() < 1e-15);
        assert!((m.probability("yoga mat") - sigmoid(-1.0)).abs() < 1e-15);
    }
}
