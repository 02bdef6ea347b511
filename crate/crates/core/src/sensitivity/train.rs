//! Seeded mini-batch training of the logistic bag-of-tokens classifier under
//! class-weighted focal loss, with per-epoch validation-F1 model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{tokenize, validate_threshold, TrainedClassifier, TrainingMetadata};
use super::focal::{class_weights, focal_grad_logit, focal_term, sigmoid, ClassWeights, FocalLossParams, DEFAULT_GAMMA};
use super::metrics::{evaluate_classifier, ClassifierMetrics};
use super::SensitivityError;
use crate::catalog::ProductText;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { learning_rate: 2e-5, epochs: 5, batch_size: 16, weight_decay: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub stratified: bool,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.2, test: 0.1, stratified: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Computed from the training split when absent.
    pub class_weights: Option<ClassWeights>,
    pub hyper: TrainHyper,
    pub split: SplitFractions,
    /// Decision threshold used for validation F1 and stored in the model.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            class_weights: None,
            hyper: TrainHyper::default(),
            split: SplitFractions::default(),
            threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub classifier: TrainedClassifier,
    pub validation: ClassifierMetrics,
    pub test: Option<ClassifierMetrics>,
    pub epoch_val_f1: Vec<f64>,
    pub split_sizes: (usize, usize, usize),
}

/// A tokenized training example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    /// Sorted distinct vocabulary indices.
    pub features: Vec<usize>,
    pub sensitive: bool,
}

/// Summed focal loss of a linear model over `samples`.
pub fn focal_objective(weights: &[f64], bias: f64, samples: &[EncodedSample], params: &FocalLossParams) -> f64 {
    samples
        .iter()
        .map(|s| {
            let p = sigmoid(bias + s.features.iter().map(|&i| weights[i]).sum::<f64>());
            let p_true = if s.sensitive { p } else { 1.0 - p };
            focal_term(p_true, params.class_weights.for_label(s.sensitive), params.gamma)
        })
        .sum()
}

/// Gradient of [`focal_objective`] with respect to `(weights, bias)`.
pub fn focal_gradient(weights: &[f64], bias: f64, samples: &[EncodedSample], params: &FocalLossParams) -> (Vec<f64>, f64) {
    let mut grad = vec![0.0; weights.len()];
    let mut grad_bias = 0.0;
    accumulate_gradient(weights, bias, samples.iter(), params, &mut grad, &mut grad_bias);
    (grad, grad_bias)
}

fn accumulate_gradient<'a>(
    weights: &[f64],
    bias: f64,
    samples: impl Iterator<Item = &'a EncodedSample>,
    params: &FocalLossParams,
    grad: &mut [f64],
    grad_bias: &mut f64,
) {
    for s in samples {
        let z = bias + s.features.iter().map(|&i| weights[i]).sum::<f64>();
        let g = focal_grad_logit(z, s.sensitive, params.class_weights.for_label(s.sensitive), params.gamma);
        for &i in &s.features {
            grad[i] += g;
        }
        *grad_bias += g;
    }
}

/// Decoupled-weight-decay Adam over a dense parameter vector. The bias is
/// the last slot and is not decayed.
struct AdamW {
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let last = params.len() - 1;
        for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let decay = if i == last { 0.0 } else { self.weight_decay * *p };
            *p -= self.lr * (m_hat / (v_hat.sqrt() + Self::EPS) + decay);
        }
    }
}

/// Seeded split into (train, val, test) index lists. With stratification each
/// class is shuffled and cut separately.
pub fn split_indices(labels: &[bool], fractions: &SplitFractions, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if fractions.stratified {
        [false, true]
            .iter()
            .map(|&class| (0..labels.len()).filter(|&i| labels[i] == class).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let n = group.len() as f64;
        let n_train = (n * fractions.train).round() as usize;
        let n_val = ((n * fractions.val).round() as usize).min(group.len() - n_train.min(group.len()));
        let n_train = n_train.min(group.len());
        train.extend_from_slice(&group[..n_train]);
        val.extend_from_slice(&group[n_train..n_train + n_val]);
        test.extend_from_slice(&group[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

fn validate(labeled: &[(ProductText, bool)], cfg: &TrainConfig) -> Result<(), SensitivityError> {
    validate_threshold(cfg.threshold)?;
    let f = &cfg.split;
    if [f.train, f.val, f.test].iter().any(|x| !(0.0..=1.0).contains(x)) || (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
        return Err(SensitivityError::InvalidParam(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
    }
    if f.train <= 0.0 || f.val <= 0.0 {
        return Err(SensitivityError::InvalidParam("train and validation fractions must be positive".into()));
    }
    let h = &cfg.hyper;
    if h.epochs == 0 || h.batch_size == 0 || h.learning_rate.is_nan() || h.learning_rate <= 0.0 || h.weight_decay < 0.0 {
        return Err(SensitivityError::InvalidParam(format!("invalid hyperparameters {h:?}")));
    }
    let positives = labeled.iter().filter(|(_, l)| *l).count();
    if positives == 0 || positives == labeled.len() {
        return Err(SensitivityError::DegenerateClass(format!(
            "need both classes, got {positives} sensitive of {}",
            labeled.len()
        )));
    }
    Ok(())
}

/// Trains on the training split, evaluates validation F1 after every epoch and
/// returns the checkpoint with the highest validation F1 (earliest on ties).
/// Deterministic for a fixed seed.
pub fn train_classifier(labeled: &[(ProductText, bool)], cfg: &TrainConfig) -> Result<TrainingOutcome, SensitivityError> {
    validate(labeled, cfg)?;
    let labels: Vec<bool> = labeled.iter().map(|(_, l)| *l).collect();
    let (train_idx, val_idx, test_idx) = split_indices(&labels, &cfg.split, cfg.hyper.seed);
    let n_train_pos = train_idx.iter().filter(|&&i| labels[i]).count();
    if val_idx.is_empty() || n_train_pos == 0 || n_train_pos == train_idx.len() {
        return Err(SensitivityError::DegenerateClass("split left a class absent from training or an empty validation set".into()));
    }

    let weights = match cfg.class_weights {
        Some(w) => w,
        None => class_weights(train_idx.len(), (train_idx.len() - n_train_pos, n_train_pos))?,
    };
    let params = FocalLossParams::new(cfg.gamma, weights)?;

    let metadata = TrainingMetadata {
        epochs: cfg.hyper.epochs,
        best_epoch: 0,
        learning_rate: cfg.hyper.learning_rate,
        weight_decay: cfg.hyper.weight_decay,
        batch_size: cfg.hyper.batch_size,
        seed: cfg.hyper.seed,
        gamma: cfg.gamma,
        class_weights: weights,
        best_f1: 0.0,
    };
    let vocab = train_idx.iter().flat_map(|&i| tokenize(labeled[i].0.as_str()));
    let mut model = TrainedClassifier::zeroed(vocab, cfg.threshold, metadata);
    let samples: Vec<EncodedSample> = train_idx
        .iter()
        .map(|&i| EncodedSample { features: model.features(labeled[i].0.as_str()), sensitive: labels[i] })
        .collect();
    let val_set: Vec<(ProductText, bool)> = val_idx.iter().map(|&i| labeled[i].clone()).collect();

    let n_params = model.weights().len() + 1;
    let mut params_vec: Vec<f64> = vec![0.0; n_params];
    let mut opt = AdamW::new(n_params, cfg.hyper.learning_rate, cfg.hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; n_params];

    let mut best: Option<(TrainedClassifier, ClassifierMetrics)> = None;
    let mut epoch_val_f1 = Vec::with_capacity(cfg.hyper.epochs);
    for epoch in 1..=cfg.hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.hyper.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (w, b) = params_vec.split_at(n_params - 1);
            let mut gb = 0.0;
            accumulate_gradient(w, b[0], batch.iter().map(|&i| &samples[i]), &params, &mut grad[..n_params - 1], &mut gb);
            grad[n_params - 1] = gb;
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.update(&mut params_vec, &grad);
        }
        model.weights_mut().copy_from_slice(&params_vec[..n_params - 1]);
        model.set_bias(params_vec[n_params - 1]);

        let val = evaluate_classifier(&model, &val_set, cfg.threshold)?;
        tracing::debug!(epoch, f1 = val.f1, loss = val.loss, "validation");
        epoch_val_f1.push(val.f1);
        if best.as_ref().is_none_or(|(_, m)| val.f1 > m.f1) {
            let mut snapshot = model.clone();
            snapshot.metadata_mut().best_epoch = epoch;
            snapshot.metadata_mut().best_f1 = val.f1;
            best = Some((snapshot, val));
        }
    }

    let (classifier, validation) = best.expect("at least one epoch");
    let test = if test_idx.is_empty() {
        None
    } else {
        let test_set: Vec<(ProductText, bool)> = test_idx.iter().map(|&i| labeled[i].clone()).collect();
        Some(evaluate_classifier(&classifier, &test_set, cfg.threshold)?)
    };
    Ok(TrainingOutcome {
        classifier,
        validation,
        test,
        epoch_val_f1,
        split_sizes: (train_idx.len(), val_idx.len(), test_idx.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> Vec<(ProductText, bool)> {
        (0..n)
            .map(|i| {
                let sensitive = i % 4 == 0;
                let text = if sensitive {
                    format!("Title: insulin pen needles pack {i}\nMain Category: Health & Household")
                } else {
                    format!("Title: garden hose nozzle {i}\nMain Category: Tools")
                };
                (ProductText(text), sensitive)
            })
            .collect()
    }

    #[test]
    fn table_defaults() {
        let h = TrainHyper::default();
        assert_eq!((h.learning_rate, h.weight_decay, h.batch_size, h.epochs), (2e-5, 0.01, 16, 5));
        let s = SplitFractions::default();
        assert_eq!((s.train, s.val, s.test, s.stratified), (0.7, 0.2, 0.1, true));
        assert_eq!(TrainConfig::default().gamma, 2.0);
    }

    #[test]
    fn stratified_split_keeps_class_ratio() {
        let labels: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        let (tr, va, te) = split_indices(&labels, &SplitFractions::default(), 3);
        // 25 positives: 18/5/2, 75 negatives: 53/15/7 (half rounds up).
        assert_eq!((tr.len(), va.len(), te.len()), (71, 20, 9));
        let pos = |ix: &[usize]| ix.iter().filter(|&&i| labels[i]).count();
        assert_eq!((pos(&tr), pos(&va), pos(&te)), (18, 5, 2));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<_> = fixture(20).into_iter().map(|(t, _)| (t, false)).collect();
        assert!(matches!(train_classifier(&data, &TrainConfig::default()), Err(SensitivityError::DegenerateClass(_))));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = fixture(200);
        let cfg = TrainConfig {
            hyper: TrainHyper { learning_rate: 0.05, epochs: 10, batch_size: 16, weight_decay: 0.01, seed: 11 },
            ..TrainConfig::default()
        };
        let a = train_classifier(&data, &cfg).unwrap();
        let b = train_classifier(&data, &cfg).unwrap();
        assert_eq!(a.classifier, b.classifier);
        assert!(a.validation.f1 >= 0.95, "{:?}", a.validation);
        assert_eq!(a.epoch_val_f1.len(), 10);
        let best = a.epoch_val_f1.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(a.classifier.metadata().best_f1, best);
    }
}
