//! Inference engines: the float reference path and the bit-packed engine
//! that runs binarized convs via xnor/popcount with batch norm folded into
//! the comparator thresholds.

use crate::activation::{combine, multi_binarize};
use crate::bitconv::{apply_folded, approx_conv, fold_bn_threshold, BitPlane};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerState, Model};
use crate::tensor::{conv2d_ref, conv2d_ref_padded, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f32,
    /// Top-5 accuracy; only reported when the model has at least 5 classes.
    pub top5_accuracy: Option<f32>,
    pub predictions: Vec<usize>,
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.dims()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Counts labels scoring within the top 5 logits of their row.
fn top5_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.dims()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(bi, &label)| {
            let row = &logits.data()[bi * classes..(bi + 1) * classes];
            let better = row.iter().filter(|&&v| v > row[label]).count();
            better < 5
        })
        .count()
}

fn report(predictions: Vec<usize>, top5: usize, classes: usize, labels: &[usize]) -> EvalReport {
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    let total = labels.len();
    EvalReport {
        total,
        correct,
        accuracy: correct as f32 / total.max(1) as f32,
        top5_accuracy: (classes >= 5).then(|| top5 as f32 / total.max(1) as f32),
        predictions,
    }
}

/// Full-precision-arithmetic inference (binarized weights/activations are
/// still simulated in float, exactly as during training forward passes).
pub fn eval_float(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(ds.len());
    let mut top5 = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let logits = model.forward(&x, false)?;
        predictions.extend(argmax_rows(&logits));
        top5 += top5_hits(&logits, &labels);
    }
    Ok(report(predictions, top5, model.classes, &ds.labels))
}

/// Value flowing between layers in the bit-packed engine: either a real
/// tensor or a bank of packed binary planes with their β weights.
enum Value {
    Real(Tensor),
    Bank { planes: Vec<BitPlane>, betas: Vec<f32> },
}

impl Value {
    /// Decodes a bank back to Σ β_n A_n; real tensors pass through.
    fn materialize(self) -> Result<Tensor> {
        match self {
            Value::Real(t) => Ok(t),
            Value::Bank { planes, betas } => {
                let decoded: Vec<Tensor> = planes.iter().map(|p| p.unpack()).collect();
                combine(&decoded, &betas)
            }
        }
    }

    fn pad_value(&self) -> f32 {
        match self {
            Value::Real(_) => 0.0,
            Value::Bank { betas, .. } => -betas.iter().sum::<f32>(),
        }
    }
}

/// Bit-packed forward pass. Binarized convs on a binary bank run as M·N
/// xnor/popcount convolutions; batch norm immediately followed by an
/// activation bank is folded into per-channel comparator thresholds.
pub fn bitpacked_logits(model: &mut Model, x: &Tensor) -> Result<Tensor> {
    let mut value = Value::Real(x.clone());
    let mut i = 0;
    let n_layers = model.layers.len();
    while i < n_layers {
        // batch-norm + activation pair: fold and consume both layers
        if let LayerState::BatchNorm(bn) = &model.layers[i] {
            if let Some(LayerState::MultiAct(act)) = model.layers.get(i + 1) {
                let r = value.materialize()?;
                let (a, b) = bn.inference_affine();
                let mut planes = Vec::with_capacity(act.bank.len());
                for &v in &act.bank.shifts_v {
                    let folded = fold_bn_threshold(&a, &b, v)?;
                    planes.push(BitPlane::pack(&apply_folded(&r, &folded)?)?);
                }
                value = Value::Bank {
                    planes,
                    betas: act.bank.betas.clone(),
                };
                i += 2;
                continue;
            }
        }
        value = match &mut model.layers[i] {
            LayerState::Conv(conv) => match conv.fit_bases()? {
                Some(set) => match &value {
                    Value::Bank { planes, betas } => {
                        let packed: Result<Vec<BitPlane>> =
                            set.bases.iter().map(BitPlane::pack).collect();
                        Value::Real(approx_conv(
                            planes,
                            betas,
                            &packed?,
                            &set.alphas,
                            conv.stride,
                            conv.padding,
                        )?)
                    }
                    Value::Real(t) => {
                        Value::Real(conv2d_ref(t, &set.reconstruct(), conv.stride, conv.padding)?)
                    }
                },
                None => {
                    let pad = value.pad_value();
                    let t = value.materialize()?;
                    Value::Real(conv2d_ref_padded(
                        &t,
                        &conv.weights,
                        conv.stride,
                        conv.padding,
                        pad,
                    )?)
                }
            },
            LayerState::MaxPool(pool) => Value::Real(pool.forward(&value.materialize()?, false)?),
            LayerState::BatchNorm(bn) => Value::Real(bn.forward(&value.materialize()?, false)?),
            LayerState::MultiAct(act) => {
                let r = value.materialize()?;
                let planes: Result<Vec<BitPlane>> = multi_binarize(&r, &act.bank)
                    .iter()
                    .map(BitPlane::pack)
                    .collect();
                Value::Bank {
                    planes: planes?,
                    betas: act.bank.betas.clone(),
                }
            }
            LayerState::Flatten(fl) => Value::Real(fl.forward(&value.materialize()?, false)?),
            LayerState::Dense(dense) => Value::Real(dense.forward(&value.materialize()?, false)?),
        };
        i += 1;
    }
    value.materialize()
}

pub fn eval_bitpacked(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(ds.len());
    let mut top5 = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch(chunk);
        let logits = bitpacked_logits(model, &x)?;
        predictions.extend(argmax_rows(&logits));
        top5 += top5_hits(&logits, &labels);
    }
    Ok(report(predictions, top5, model.classes, &ds.labels))
}
