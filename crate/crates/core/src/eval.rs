//! Test-set evaluation.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::model::{cross_entropy, Layer, ModelGraph};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub top1: f64,
    /// Only reported when there are at least 10 classes.
    pub top5: Option<f64>,
    pub loss: f64,
}

impl Evaluation {
    pub fn loss_is_finite(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Whether `target` is among the `k` largest logits. Ties resolve to the
/// lower class index, matching argmax.
fn in_top_k(row: &[f64], target: usize, k: usize) -> bool {
    let t = row[target];
    if t.is_nan() {
        return false;
    }
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < target) || (v.is_nan() && j < target))
        .count();
    ahead < k
}

pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    let classes = logits.shape()[1];
    let loss = cross_entropy(logits, labels)?;
    let mut correct = 0;
    let mut top5 = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if in_top_k(row, y, 1) {
            correct += 1;
        }
        if in_top_k(row, y, 5) {
            top5 += 1;
        }
    }
    let total = labels.len();
    Ok(Evaluation {
        correct,
        total,
        top1: correct as f64 / total as f64,
        top5: (classes >= 10).then(|| top5 as f64 / total as f64),
        loss,
    })
}

/// Accuracy and mean loss over the whole dataset.
pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<Evaluation> {
    let images = data.images();
    let labels = data.labels();
    let n = data.len();
    let mut correct = 0;
    let mut top5 = 0;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.forward(&images.select_rows(&idx)?)?;
        let e = evaluate_logits(&logits, &labels[start..end])?;
        correct += e.correct;
        top5 += e.top5.map_or(0, |t| (t * e.total as f64).round() as usize);
        loss_sum += e.loss * e.total as f64;
        start = end;
    }
    Ok(Evaluation {
        correct,
        total: n,
        top1: correct as f64 / n as f64,
        top5: (model.num_classes() >= 10).then(|| top5 as f64 / n as f64),
        loss: loss_sum / n as f64,
    })
}

/// Source of validation metrics for the attack loop. The attack never sees
/// the data behind it.
pub trait Validator {
    fn validate(&self, model: &ModelGraph) -> Result<Evaluation>;
}

/// Validates on a full held-out split.
///
/// Keeps the input activations of every weighted layer from the previous
/// call. When the next model differs from the previous one only from some
/// layer onward, just that suffix is re-run; results are identical to
/// [`evaluate`].
pub struct TestSetValidator<'a> {
    data: &'a Dataset,
    cache: RefCell<Option<ActivationCache>>,
}

struct ActivationCache {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `inputs[chunk][j]` is the input of weighted layer `j`.
    inputs: Vec<Vec<Tensor>>,
}

impl<'a> TestSetValidator<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            data,
            cache: RefCell::new(None),
        }
    }

    /// Index of the first layer that differs from the cached model.
    fn first_change(&self, model: &ModelGraph) -> usize {
        match &*self.cache.borrow() {
            Some(c)
                if c.input_shape == model.input_shape()
                    && c.layers.len() == model.layers().len() =>
            {
                c.layers
                    .iter()
                    .zip(model.layers())
                    .position(|(a, b)| a != b)
                    .unwrap_or(c.layers.len())
            }
            _ => 0,
        }
    }
}

impl Validator for TestSetValidator<'_> {
    fn validate(&self, model: &ModelGraph) -> Result<Evaluation> {
        let changed = self.first_change(model);
        let weighted = model.weighted_layers();
        // last weighted layer whose input is still valid
        let resume = weighted.iter().rposition(|&i| i <= changed);
        let mut old = match (resume, self.cache.borrow_mut().take()) {
            (Some(_), Some(c)) => Some(c.inputs.into_iter()),
            _ => None,
        };
        let labels = self.data.labels();
        let n = self.data.len();
        let mut inputs = Vec::new();
        let (mut correct, mut top5, mut loss_sum) = (0, 0, 0.0);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let (mut saved, mut x, mut at, mut next) =
                match (resume, old.as_mut().and_then(|o| o.next())) {
                    (Some(j), Some(mut chunk)) => {
                        chunk.truncate(j + 1);
                        let x = chunk.pop().unwrap();
                        (chunk, x, weighted[j], j)
                    }
                    _ => {
                        let idx: Vec<usize> = (start..end).collect();
                        let x = self.data.images().select_rows(&idx)?;
                        model.check_batch(&x)?;
                        (Vec::with_capacity(weighted.len()), x, 0, 0)
                    }
                };
            while next < weighted.len() {
                x = model.forward_span(at, weighted[next], &x)?;
                at = weighted[next];
                saved.push(x.clone());
                next += 1;
            }
            let logits = model.forward_span(at, model.layers().len(), &x)?;
            inputs.push(saved);
            let e = evaluate_logits(&logits, &labels[start..end])?;
            correct += e.correct;
            top5 += e.top5.map_or(0, |t| (t * e.total as f64).round() as usize);
            loss_sum += e.loss * e.total as f64;
        }
        *self.cache.borrow_mut() = Some(ActivationCache {
            input_shape: model.input_shape().to_vec(),
            layers: model.layers().to_vec(),
            inputs,
        });
        Ok(Evaluation {
            correct,
            total: n,
            top1: correct as f64 / n as f64,
            top5: (model.num_classes() >= 10).then(|| top5 as f64 / n as f64),
            loss: loss_sum / n as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_ties_go_low() {
        let row = [1.0, 1.0, 0.5];
        assert!(in_top_k(&row, 0, 1));
        assert!(!in_top_k(&row, 1, 1));
        assert!(in_top_k(&row, 1, 2));
        assert!(!in_top_k(&[f64::NAN, 0.0], 0, 1));
    }

    #[test]
    fn top5_only_for_ten_classes() {
        let two = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = evaluate_logits(&two, &[0, 0]).unwrap();
        assert_eq!(e.correct, 1);
        assert_eq!(e.top5, None);
        let ten = Tensor::new(vec![1, 10], (0..10).map(|v| v as f64).collect()).unwrap();
        let e = evaluate_logits(&ten, &[5]).unwrap();
        assert_eq!(e.top1, 0.0);
        assert_eq!(e.top5, Some(1.0));
        let e = evaluate_logits(&ten, &[4]).unwrap();
        assert_eq!(e.top5, Some(0.0));
    }

    #[test]
    fn cached_validation_matches_full_evaluation() {
        use crate::attack::apply_flips;
        use crate::bits::BitAddress;
        use crate::layers::LayerSpec;

        let specs = [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::FullyConnected {
                inputs: 588,
                outputs: 16,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                inputs: 16,
                outputs: 10,
            },
        ];
        let data = crate::synth::digits(600, 9)
            .unwrap()
            .with_sample_shape(&[1, 28, 28])
            .unwrap();
        let mut m = ModelGraph::init(vec![1, 28, 28], &specs, 3)
            .unwrap()
            .quantize(8)
            .unwrap();
        let v = TestSetValidator::new(&data);
        assert_eq!(v.validate(&m).unwrap(), evaluate(&m, &data).unwrap());
        for (step, layer) in [2, 0, 1, 1, 2, 0].into_iter().enumerate() {
            let weight = step * 7 % m.quantized(layer).unwrap().len();
            apply_flips(
                &mut m,
                &[BitAddress {
                    layer,
                    weight,
                    bit: 7,
                }],
            )
            .unwrap();
            assert_eq!(
                v.validate(&m).unwrap(),
                evaluate(&m, &data).unwrap(),
                "step {step}"
            );
        }
        assert_eq!(v.validate(&m).unwrap(), evaluate(&m, &data).unwrap());
        let other = m.to_float();
        assert_eq!(
            v.validate(&other).unwrap(),
            evaluate(&other, &data).unwrap()
        );
    }
}
