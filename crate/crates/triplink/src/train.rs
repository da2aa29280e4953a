//! Triplet loss, its exact gradients, the mini-batch trainer, and the
//! cosine accuracy validators.
//!
//! The loss is max(|a-p|^2 - |a-n|^2 + margin, 0) over encoder outputs.
//! Training backpropagates through L2 normalization with the exact
//! Jacobian and through pooling by distributing each member's raw
//! gradient to its table rows scaled by the pooling weights. Updates are
//! plain gradient descent on the batch-mean loss; the returned parameters
//! are those of the epoch with the best validation threshold accuracy
//! (ties go to the earliest epoch). With no validation triplets the final
//! parameters stand.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

use crate::encoder::{Encoder, EncoderError, PooledEncoder};
use crate::hash::mix64;
use crate::report::cosine_similarity;
use crate::scalar::{dot, from_f64, l2_norm, to_f64, Scalar};
use crate::triplets::TripletSet;

/// Threshold used for the per-epoch validation threshold accuracy.
pub const VALIDATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("vectors differ in dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training triplet set is empty")]
    EmptyTrainingSet,
    #[error("triplet set is empty; accuracy is undefined")]
    EmptyTripletSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
    /// Stop early when validation threshold accuracy has not improved for
    /// this many epochs. Ignored when there are no validation triplets.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.2,
            batch_size: 64,
            epochs: 10,
            learning_rate: 0.05,
            shuffle_seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "margin must be finite and non-negative, got {}",
                self.margin
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training triplets with positive loss this epoch.
    pub active_fraction: f64,
    pub val_relative_acc: f64,
    pub val_threshold_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    /// Export as CSV: `epoch,mean_loss,active_fraction,val_relative_acc,val_threshold_acc`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io_err = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = String::from("epoch,mean_loss,active_fraction,val_relative_acc,val_threshold_acc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.mean_loss, e.active_fraction, e.val_relative_acc, e.val_threshold_acc
            ));
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(out.as_bytes()).map_err(io_err)?;
        Ok(())
    }
}

fn check_dims<F: Scalar>(a: &[F], p: &[F], n: &[F]) -> Result<(), TrainError> {
    if a.len() != p.len() {
        return Err(TrainError::DimensionMismatch(a.len(), p.len()));
    }
    if a.len() != n.len() {
        return Err(TrainError::DimensionMismatch(a.len(), n.len()));
    }
    Ok(())
}

fn squared_distance<F: Scalar>(x: &[F], y: &[F]) -> F {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// max(|a-p|^2 - |a-n|^2 + margin, 0).
///
/// A NaN hinge argument propagates instead of clamping to 0 so callers
/// can detect poisoned inputs.
pub fn triplet_loss<F: Scalar>(a: &[F], p: &[F], n: &[F], margin: F) -> Result<F, TrainError> {
    check_dims(a, p, n)?;
    let arg = squared_distance(a, p) - squared_distance(a, n) + margin;
    Ok(if arg > F::zero() || arg.is_nan() {
        arg
    } else {
        F::zero()
    })
}

/// Exact gradients of the loss with respect to (a, p, n).
///
/// Inactive triplets (hinge argument <= 0, boundary included) have zero
/// gradients; active ones have ga = 2(n-p), gp = -2(a-p), gn = 2(a-n).
pub fn triplet_grad<F: Scalar>(
    a: &[F],
    p: &[F],
    n: &[F],
    margin: F,
) -> Result<(Vec<F>, Vec<F>, Vec<F>), TrainError> {
    check_dims(a, p, n)?;
    let arg = squared_distance(a, p) - squared_distance(a, n) + margin;
    let dim = a.len();
    if arg <= F::zero() {
        let zeros = vec![F::zero(); dim];
        return Ok((zeros.clone(), zeros.clone(), zeros));
    }
    let two = from_f64::<F>(2.0);
    let ga = n.iter().zip(p).map(|(&ni, &pi)| two * (ni - pi)).collect();
    let gp = a.iter().zip(p).map(|(&ai, &pi)| -two * (ai - pi)).collect();
    let gn = a.iter().zip(n).map(|(&ai, &ni)| two * (ai - ni)).collect();
    Ok((ga, gp, gn))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMode {
    /// cos(A,P) must strictly beat cos(A,N).
    Relative,
    /// cos(A,P) >= threshold and cos(A,N) < threshold.
    Threshold,
}

/// Fraction of triplets the encoder orders correctly.
pub fn triplet_accuracy<F: Scalar, E: Encoder<F> + ?Sized>(
    encoder: &E,
    triplets: &TripletSet,
    mode: AccuracyMode,
    threshold: f64,
) -> Result<f64, TrainError> {
    if triplets.triplets.is_empty() {
        return Err(TrainError::EmptyTripletSet);
    }
    let threshold = from_f64::<F>(threshold);
    let mut correct = 0usize;
    for t in &triplets.triplets {
        let a = encoder.encode(&t.anchor)?;
        let p = encoder.encode(&t.positive)?;
        let n = encoder.encode(&t.negative)?;
        let cos_ap = cosine_similarity(&a, &p)?;
        let cos_an = cosine_similarity(&a, &n)?;
        let ok = match mode {
            AccuracyMode::Relative => cos_ap > cos_an,
            AccuracyMode::Threshold => cos_ap >= threshold && cos_an < threshold,
        };
        if ok {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.triplets.len() as f64)
}

struct Forward<F> {
    weights: Vec<(usize, F)>,
    raw_norm: F,
    output: Vec<F>,
}

fn forward<F: Scalar, E: PooledEncoder<F> + ?Sized>(
    enc: &E,
    key: &str,
) -> Result<Forward<F>, TrainError> {
    let weights = enc.pool_weights(key)?;
    let dim = enc.dim();
    let params = enc.params();
    let mut raw = vec![F::zero(); dim];
    for &(row, w) in &weights {
        let base = row * dim;
        for (o, &x) in raw.iter_mut().zip(&params[base..base + dim]) {
            *o = *o + w * x;
        }
    }
    let raw_norm = l2_norm(&raw);
    let output = if enc.normalizes() && raw_norm > F::zero() {
        raw.iter().map(|&v| v / raw_norm).collect()
    } else {
        raw
    };
    Ok(Forward {
        weights,
        raw_norm,
        output,
    })
}

/// Distribute one member's output gradient back to the table rows.
///
/// Through normalization y = v/|v| the exact pullback is
/// (g - y (y . g)) / |v|; a zero raw vector sits at the singular point and
/// contributes no update.
fn backprop_member<F: Scalar, E: PooledEncoder<F> + ?Sized>(
    enc: &E,
    fwd: &Forward<F>,
    grad_out: &[F],
    acc: &mut BTreeMap<usize, Vec<F>>,
) {
    if fwd.weights.is_empty() {
        return;
    }
    let grad_raw: Vec<F> = if enc.normalizes() {
        if fwd.raw_norm == F::zero() {
            return;
        }
        let y_dot_g = dot(&fwd.output, grad_out);
        fwd.output
            .iter()
            .zip(grad_out)
            .map(|(&y, &g)| (g - y * y_dot_g) / fwd.raw_norm)
            .collect()
    } else {
        grad_out.to_vec()
    };
    let dim = grad_raw.len();
    for &(row, w) in &fwd.weights {
        let slot = acc.entry(row).or_insert_with(|| vec![F::zero(); dim]);
        for (s, &g) in slot.iter_mut().zip(&grad_raw) {
            *s = *s + w * g;
        }
    }
}

/// Mini-batch gradient descent over the encoder parameters.
///
/// Deterministic for fixed (encoder parameters, triplet order, config):
/// epochs shuffle with a seed derived from (shuffle_seed, epoch) and
/// batches accumulate gradients in triplet order.
pub fn train_encoder<F: Scalar, E: PooledEncoder<F> + ?Sized>(
    encoder: &mut E,
    train: &TripletSet,
    val: &TripletSet,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    if train.triplets.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let n = train.triplets.len();
    let dim = encoder.dim();
    let margin = from_f64::<F>(config.margin);
    let mut history = TrainHistory::default();
    let mut best: Option<(Vec<F>, f64, usize)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rand::rngs::StdRng::seed_from_u64(mix64(config.shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut active = 0usize;

        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc: BTreeMap<usize, Vec<F>> = BTreeMap::new();
            for &ti in batch {
                let t = &train.triplets[ti];
                let fa = forward(encoder, &t.anchor)?;
                let fp = forward(encoder, &t.positive)?;
                let fnn = forward(encoder, &t.negative)?;
                let loss = to_f64(triplet_loss(&fa.output, &fp.output, &fnn.output, margin)?);
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_index,
                    });
                }
                loss_sum += loss;
                if loss > 0.0 {
                    active += 1;
                    let (ga, gp, gn) =
                        triplet_grad(&fa.output, &fp.output, &fnn.output, margin)?;
                    backprop_member(encoder, &fa, &ga, &mut acc);
                    backprop_member(encoder, &fp, &gp, &mut acc);
                    backprop_member(encoder, &fnn, &gn, &mut acc);
                }
            }
            let scale = from_f64::<F>(config.learning_rate / batch.len() as f64);
            let params = encoder.params_mut();
            for (row, grad) in acc {
                let base = row * dim;
                for (j, g) in grad.into_iter().enumerate() {
                    params[base + j] = params[base + j] - scale * g;
                }
            }
        }

        let (val_relative_acc, val_threshold_acc) = if val.triplets.is_empty() {
            (0.0, 0.0)
        } else {
            (
                triplet_accuracy(&*encoder, val, AccuracyMode::Relative, VALIDATION_THRESHOLD)?,
                triplet_accuracy(&*encoder, val, AccuracyMode::Threshold, VALIDATION_THRESHOLD)?,
            )
        };
        history.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n as f64,
            active_fraction: active as f64 / n as f64,
            val_relative_acc,
            val_threshold_acc,
        });

        if !val.triplets.is_empty() {
            // Threshold accuracy drives selection: the relative accuracy can
            // saturate at initialization, which would pin selection to epoch 1.
            let improved = best
                .as_ref()
                .map_or(true, |&(_, best_acc, _)| val_threshold_acc > best_acc);
            if improved {
                best = Some((encoder.params().to_vec(), val_threshold_acc, epoch));
            }
            if let Some(patience) = config.early_stop_patience {
                let best_epoch = best.as_ref().map_or(epoch, |&(_, _, e)| e);
                if epoch - best_epoch >= patience {
                    break;
                }
            }
        }
    }

    if let Some((params, _, _)) = best {
        encoder.params_mut().copy_from_slice(&params);
    }
    Ok(history)
}
