//! Pairwise entity matching: pair featurization over two embeddings and a
//! from-scratch logistic-regression classifier.
//!
//! Pair features are [u; v; |u - v|; cos(u, v)], length 3 * dim + 1.
//! Training is full-batch gradient descent on mean cross-entropy plus an
//! L2 penalty (lambda/2) * |w|^2 with the bias unregularized. Weights start
//! at zero, so training is deterministic; the seed parameter exists only
//! for interface stability.

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::report::cosine_similarity;
use crate::scalar::{from_f64, to_f64, Scalar};

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("vectors differ in dimension: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("features and labels differ in length: {features} vs {labels}")]
    LengthMismatch { features: usize, labels: usize },
    #[error("cannot train on an empty pair set")]
    EmptyTrainingSet,
    #[error("all labels belong to one class; cannot fit a classifier")]
    SingleClass,
    #[error("feature vector {index} has length {got}, expected {expected}")]
    InconsistentFeatures {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid matcher config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
}

/// [u; v; |u - v| componentwise; cos(u, v)]. Cosine of a zero vector is 0.
pub fn pair_features<F: Scalar>(u: &[F], v: &[F]) -> Result<Vec<F>, MatcherError> {
    if u.len() != v.len() {
        return Err(MatcherError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let mut out = Vec::with_capacity(3 * u.len() + 1);
    out.extend_from_slice(u);
    out.extend_from_slice(v);
    out.extend(u.iter().zip(v).map(|(&a, &b)| (a - b).abs()));
    out.push(cosine_similarity(u, v)?);
    Ok(out)
}

/// sigma(z) = 1 / (1 + e^-z).
pub fn sigmoid<F: Scalar>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Numerically stable ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel<F: Scalar> {
    pub weights: Vec<F>,
    pub bias: F,
    pub l2_lambda: f64,
    /// Decision threshold in (0, 1): label 1 iff probability >= threshold.
    pub threshold: f64,
}

impl<F: Scalar> LogRegModel<F> {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, MatcherError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(MatcherError::InvalidConfig(format!(
                "threshold must lie strictly between 0 and 1, got {threshold}"
            )));
        }
        self.threshold = threshold;
        Ok(self)
    }

    /// Persist as text: line 1 `logreg dim=<k> lambda=<l> threshold=<t>`,
    /// line 2 the bias, line 3 the space-separated weights.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MatcherError> {
        let path = path.as_ref();
        let io_err = |source| MatcherError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = format!(
            "logreg dim={} lambda={} threshold={}\n{}\n",
            self.weights.len(),
            self.l2_lambda,
            self.threshold,
            to_f64(self.bias)
        );
        for (i, &w) in self.weights.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&to_f64(w).to_string());
        }
        out.push('\n');
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(out.as_bytes()).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MatcherError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let content = std::fs::read_to_string(path).map_err(|source| MatcherError::Io {
            path: path_str.clone(),
            source,
        })?;
        let malformed = |line: usize, reason: String| MatcherError::Malformed {
            path: path_str.clone(),
            line,
            reason,
        };
        let mut lines = content.lines();
        let header = lines.next().ok_or_else(|| malformed(1, "empty file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("logreg") {
            return Err(malformed(1, "expected 'logreg' header".into()));
        }
        let mut dim = None;
        let mut lambda = None;
        let mut threshold = None;
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| malformed(1, format!("expected key=value, found '{part}'")))?;
            match key {
                "dim" => dim = value.parse::<usize>().ok(),
                "lambda" => lambda = value.parse::<f64>().ok(),
                "threshold" => threshold = value.parse::<f64>().ok(),
                _ => return Err(malformed(1, format!("unknown key '{key}'"))),
            }
        }
        let dim = dim.ok_or_else(|| malformed(1, "missing or bad dim".into()))?;
        let l2_lambda = lambda.ok_or_else(|| malformed(1, "missing or bad lambda".into()))?;
        let threshold = threshold.ok_or_else(|| malformed(1, "missing or bad threshold".into()))?;

        let bias_line = lines.next().ok_or_else(|| malformed(2, "missing bias line".into()))?;
        let bias: f64 = bias_line
            .trim()
            .parse()
            .map_err(|_| malformed(2, format!("bad bias '{bias_line}'")))?;
        let weights_line = lines
            .next()
            .ok_or_else(|| malformed(3, "missing weights line".into()))?;
        let weights: Result<Vec<f64>, _> = weights_line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect();
        let weights = weights.map_err(|e| malformed(3, format!("bad weight: {e}")))?;
        if weights.len() != dim {
            return Err(malformed(
                3,
                format!("expected {dim} weights, found {}", weights.len()),
            ));
        }
        LogRegModel {
            weights: weights.into_iter().map(from_f64).collect(),
            bias: from_f64(bias),
            l2_lambda,
            threshold: 0.5,
        }
        .with_threshold(threshold)
    }
}

fn check_training_inputs<F: Scalar>(
    features: &[Vec<F>],
    labels: &[bool],
) -> Result<usize, MatcherError> {
    if features.len() != labels.len() {
        return Err(MatcherError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(MatcherError::EmptyTrainingSet);
    }
    let dim = features[0].len();
    for (index, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(MatcherError::InconsistentFeatures {
                index,
                expected: dim,
                got: f.len(),
            });
        }
    }
    Ok(dim)
}

/// Mean cross-entropy plus (lambda/2) * |w|^2, the trained objective.
/// The bias is not penalized.
pub fn logreg_objective<F: Scalar>(
    weights: &[F],
    bias: F,
    features: &[Vec<F>],
    labels: &[bool],
    l2_lambda: f64,
) -> Result<f64, MatcherError> {
    check_training_inputs(features, labels)?;
    let mut ce_sum = 0.0f64;
    for (x, &y) in features.iter().zip(labels) {
        let z = to_f64(crate::scalar::dot(weights, x) + bias);
        // -ln sigma(z) = softplus(-z); -ln(1 - sigma(z)) = softplus(z).
        ce_sum += if y { softplus(-z) } else { softplus(z) };
    }
    let penalty: f64 = weights.iter().map(|&w| to_f64(w) * to_f64(w)).sum::<f64>()
        * (l2_lambda / 2.0);
    Ok(ce_sum / features.len() as f64 + penalty)
}

/// Full-batch gradient descent from zero-initialized weights.
///
/// The seed parameter is unused (zero initialization leaves nothing
/// random) and exists so callers can keep one training interface.
pub fn train_logreg<F: Scalar>(
    features: &[Vec<F>],
    labels: &[bool],
    learning_rate: f64,
    epochs: usize,
    l2_lambda: f64,
    _seed: u64,
) -> Result<LogRegModel<F>, MatcherError> {
    let dim = check_training_inputs(features, labels)?;
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(MatcherError::SingleClass);
    }
    if !(learning_rate.is_finite() && learning_rate >= 0.0) {
        return Err(MatcherError::InvalidConfig(format!(
            "learning_rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    if !(l2_lambda.is_finite() && l2_lambda >= 0.0) {
        return Err(MatcherError::InvalidConfig(format!(
            "l2_lambda must be finite and non-negative, got {l2_lambda}"
        )));
    }

    let n = features.len();
    let inv_n = from_f64::<F>(1.0 / n as f64);
    let lambda = from_f64::<F>(l2_lambda);
    let lr = from_f64::<F>(learning_rate);
    let mut weights = vec![F::zero(); dim];
    let mut bias = F::zero();

    for epoch in 1..=epochs {
        let mut grad_w = vec![F::zero(); dim];
        let mut grad_b = F::zero();
        for (x, &y) in features.iter().zip(labels) {
            let z = crate::scalar::dot(&weights, x) + bias;
            let err = sigmoid(z) - if y { F::one() } else { F::zero() };
            for (g, &xi) in grad_w.iter_mut().zip(x) {
                *g = *g + err * xi;
            }
            grad_b = grad_b + err;
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w = *w - lr * (*g * inv_n + lambda * *w);
        }
        bias = bias - lr * grad_b * inv_n;

        let objective = logreg_objective(&weights, bias, features, labels, l2_lambda)?;
        if !objective.is_finite() {
            return Err(MatcherError::NonFiniteLoss { epoch });
        }
    }

    Ok(LogRegModel {
        weights,
        bias,
        l2_lambda,
        threshold: 0.5,
    })
}

/// (probability, label): probability = sigma(w . x + b), label 1 iff
/// probability >= threshold.
pub fn predict<F: Scalar>(
    model: &LogRegModel<F>,
    features: &[F],
) -> Result<(F, bool), MatcherError> {
    if features.len() != model.weights.len() {
        return Err(MatcherError::DimensionMismatch {
            left: model.weights.len(),
            right: features.len(),
        });
    }
    let z = crate::scalar::dot(&model.weights, features) + model.bias;
    let probability = sigmoid(z);
    Ok((probability, to_f64(probability) >= model.threshold))
}
