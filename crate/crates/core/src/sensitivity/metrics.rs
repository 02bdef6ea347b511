use serde::{Deserialize, Serialize};

use super::classifier::TrainedClassifier;
use super::focal::focal_term;
use super::SensitivityError;
use crate::catalog::ProductText;

/// Binary confusion counts with "sensitive" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
    pub confusion: Confusion,
}

impl ClassifierMetrics {
    /// Ratios with a zero denominator are reported as 0.
    pub fn from_confusion(c: Confusion, loss: f64) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { accuracy: ratio(c.tp + c.tn, c.total()), precision, recall, f1, loss, confusion: c }
    }
}

/// Scores `labeled` at `threshold`. `loss` is the mean focal term under the
/// classifier's training gamma and class weights.
pub fn evaluate_classifier(
    c: &TrainedClassifier,
    labeled: &[(ProductText, bool)],
    threshold: f64,
) -> Result<ClassifierMetrics, SensitivityError> {
    if labeled.is_empty() {
        return Err(SensitivityError::InvalidParam("evaluation set is empty".into()));
    }
    let meta = c.metadata();
    let mut confusion = Confusion::default();
    let mut loss = 0.0;
    for (text, label) in labeled {
        let p = c.probability(text.as_str());
        confusion.record(p > threshold, *label);
        let p_true = if *label { p } else { 1.0 - p };
        loss += focal_term(p_true, meta.class_weights.for_label(*label), meta.gamma);
    }
    Ok(ClassifierMetrics::from_confusion(confusion, loss / labeled.len() as f64))
}
