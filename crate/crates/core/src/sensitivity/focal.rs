//! Class-weighted focal loss for the binary sensitivity task.

use serde::{Deserialize, Serialize};

use super::SensitivityError;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-12;

/// Focusing exponent used for the sensitivity classifier.
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub nonsensitive: f64,
    pub sensitive: f64,
}

impl ClassWeights {
    pub const UNIT: Self = Self { nonsensitive: 1.0, sensitive: 1.0 };

    pub fn for_label(&self, sensitive: bool) -> f64 {
        if sensitive {
            self.sensitive
        } else {
            self.nonsensitive
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossParams {
    pub gamma: f64,
    pub class_weights: ClassWeights,
}

impl FocalLossParams {
    pub fn new(gamma: f64, class_weights: ClassWeights) -> Result<Self, SensitivityError> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(SensitivityError::InvalidParam(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(class_weights.nonsensitive > 0.0 && class_weights.sensitive > 0.0) {
            return Err(SensitivityError::InvalidParam(format!("class weights must be positive, got {class_weights:?}")));
        }
        Ok(Self { gamma, class_weights })
    }
}

/// Inverse-frequency weights `n_total / (2 * n_c)`, ordered
/// (nonsensitive, sensitive).
pub fn class_weights(n_total: usize, per_class: (usize, usize)) -> Result<ClassWeights, SensitivityError> {
    let (n_ns, n_s) = per_class;
    if n_ns == 0 || n_s == 0 {
        return Err(SensitivityError::DegenerateClass(format!("class counts {per_class:?} contain an empty class")));
    }
    if n_ns + n_s != n_total {
        return Err(SensitivityError::InvalidParam(format!("class counts {per_class:?} do not sum to {n_total}")));
    }
    let n = n_total as f64;
    Ok(ClassWeights { nonsensitive: n / (2.0 * n_ns as f64), sensitive: n / (2.0 * n_s as f64) })
}

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal term for one sample, given the probability of its true class.
#[inline]
pub fn focal_term(p_true: f64, weight: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p_true);
    -weight * (1.0 - p).powf(gamma) * p.ln()
}

/// `-sum_i w_i (1 - p_i)^gamma ln(p_i)` over true-class probabilities.
pub fn focal_loss(probs_true_class: &[f64], true_class_weights: &[f64], gamma: f64) -> Result<f64, SensitivityError> {
    if probs_true_class.len() != true_class_weights.len() {
        return Err(SensitivityError::Shape { expected: probs_true_class.len(), got: true_class_weights.len() });
    }
    Ok(probs_true_class
        .iter()
        .zip(true_class_weights)
        .map(|(&p, &w)| focal_term(p, w, gamma))
        .sum())
}

/// Derivative of the focal term with respect to the logit `z`, where the
/// predicted sensitive probability is `sigmoid(z)`.
///
/// With `p_t = sigmoid(s z)` and `s = +1` for sensitive samples, `-1`
/// otherwise: `dL/dz = s w [gamma p_t (1-p_t)^gamma ln p_t - (1-p_t)^(gamma+1)]`.
pub fn focal_grad_logit(logit: f64, sensitive: bool, weight: f64, gamma: f64) -> f64 {
    let s = if sensitive { 1.0 } else { -1.0 };
    let pt = clamp_prob(sigmoid(s * logit));
    let q = 1.0 - pt;
    s * weight * (gamma * pt * q.powf(gamma) * pt.ln() - q.powf(gamma + 1.0))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
