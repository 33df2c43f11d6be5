//! Minibatch SGD training loop with per-epoch learning-rate decay and a CSV
//! training log.

use std::fmt::Write as _;

use crate::config::{RunConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::infer;
use crate::model::Model;
use crate::tensor::{Rng, Tensor};

/// Softmax + cross-entropy over a [batch, classes] logit tensor. Returns the
/// mean loss and the logit gradient (probs - onehot) / batch.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (batch, classes) = match logits.dims() {
        &[b, c] => (b, c),
        _ => {
            return Err(Error::InvalidShape(format!(
                "loss expects rank-2 logits, got {:?}",
                logits.dims()
            )))
        }
    };
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            context: "loss labels".into(),
            lhs: vec![batch],
            rhs: vec![labels.len()],
        });
    }
    let src = logits.data();
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let g = grad.data_mut();
    let mut loss = 0.0f64;
    for bi in 0..batch {
        let row = &src[bi * classes..(bi + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let label = labels[bi];
        if label >= classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        loss += denom.ln() - (row[label] - max) as f64;
        for (ci, &e) in exps.iter().enumerate() {
            let p = e / denom;
            let target = if ci == label { 1.0 } else { 0.0 };
            g[bi * classes + ci] = ((p - target) / batch as f64) as f32;
        }
    }
    Ok(((loss / batch as f64) as f32, grad))
}

/// Fraction of argmax predictions matching the labels.
pub fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f32 {
    let classes = logits.dims()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(bi, &label)| {
            let row = &logits.data()[bi * classes..(bi + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            pred == label
        })
        .count();
    hits as f32 / labels.len().max(1) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_acc: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc
            );
        }
        s
    }
}

/// Runs the configured number of epochs over `train`, validating on `val`
/// after each. The learning rate decays by `lr_decay` per epoch. A non-finite
/// loss aborts immediately with the offending epoch/batch identified.
pub fn train_epochs(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = Rng::new(cfg.seed ^ 0x7261_696e); // distinct stream from init
    let mut lr = cfg.lr;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.batch(chunk);
            let logits = model.forward(&x, true)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    layer: 0,
                    context: format!("loss diverged at epoch {epoch}, batch {batch_idx}"),
                });
            }
            model.backward(&grad)?;
            model.step(lr, cfg.momentum);
            loss_sum += loss as f64;
            acc_sum += batch_accuracy(&logits, &labels) as f64;
            batches += 1;
        }
        let val_acc = if val.is_empty() {
            f32::NAN
        } else {
            infer::eval_float(model, val, cfg.batch_size)?.accuracy
        };
        log.epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: (loss_sum / batches as f64) as f32,
            train_acc: (acc_sum / batches as f64) as f32,
            val_acc,
        });
        lr *= cfg.lr_decay;
    }
    Ok(log)
}

/// Builds the binarized model and seeds it with the weights of a
/// full-precision model trained under the same topology.
pub fn init_from_full_precision(cfg: &RunConfig, source: &Model) -> Result<Model> {
    let mut rng = Rng::new(cfg.train.seed);
    let mut model = Model::from_spec(&cfg.model, &cfg.train, &mut rng)?;
    model.adopt_weights_from(source)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits_give_log_classes_loss() {
        let logits = Tensor::zeros(vec![2, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert_abs_diff_eq!(loss, (4.0f32).ln(), epsilon = 1e-6);
        // each row: p = 1/4 everywhere, grad = (p - target)/batch
        assert_abs_diff_eq!(grad.data()[0], (0.25 - 1.0) / 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(grad.data()[1], 0.25 / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let logits = rng.normal_tensor(vec![3, 4], 1.0);
        let labels = [2usize, 0, 3];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-3f32;
        for i in 0..logits.data().len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= eps;
            let (lp, _) = softmax_cross_entropy(&plus, &labels).unwrap();
            let (lm, _) = softmax_cross_entropy(&minus, &labels).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(grad.data()[i], fd, epsilon = 1e-3);
        }
    }

    #[test]
    fn loss_is_shift_invariant() {
        let logits = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let shifted = Tensor::new(vec![1, 3], vec![101.0, 102.0, 103.0]).unwrap();
        let (a, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        let (b, _) = softmax_cross_entropy(&shifted, &[1]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-5);
    }

    #[test]
    fn batch_accuracy_counts_argmax_hits() {
        let logits = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(batch_accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(batch_accuracy(&logits, &[1, 1]), 0.5);
    }

    #[test]
    fn csv_header_and_rows() {
        let log = TrainLog {
            epochs: vec![EpochStats {
                epoch: 0,
                lr: 0.01,
                train_loss: 0.7,
                train_acc: 0.5,
                val_acc: 0.6,
            }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,lr,train_loss,train_acc,val_acc"));
        assert_eq!(lines.next(), Some("0,0.01,0.7,0.5,0.6"));
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let logits = Tensor::zeros(vec![1, 2]);
        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
    }
}
