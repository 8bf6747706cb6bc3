//! Mini-batch SGD trainer for victim models, plus the standard desk
//! architectures.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::layers::LayerSpec;
use crate::model::{ModelGraph, ParamMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Two conv blocks and two fully-connected layers over `[1, 28, 28]`,
/// about 103K weights.
pub fn desk_cnn() -> (Vec<usize>, Vec<LayerSpec>) {
    let conv = |in_channels, out_channels| LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
    (
        vec![1, 28, 28],
        vec![
            conv(1, 8),
            LayerSpec::Relu,
            pool,
            conv(8, 16),
            LayerSpec::Relu,
            pool,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected {
                inputs: 784,
                outputs: 128,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                inputs: 128,
                outputs: 10,
            },
        ],
    )
}

/// Single linear layer over `features` inputs.
pub fn linear(features: usize, classes: usize) -> (Vec<usize>, Vec<LayerSpec>) {
    (
        vec![features],
        vec![LayerSpec::FullyConnected {
            inputs: features,
            outputs: classes,
        }],
    )
}

/// SGD with momentum over shuffled mini-batches. Deterministic in
/// `config.seed`.
pub fn train_victim(
    model: &ModelGraph,
    train: &Dataset,
    test: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    model.require_mode(ParamMode::Float)?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = model.num_weighted();
    let mut vel_w: Vec<Vec<f64>> = (0..layers)
        .map(|l| vec![0.0; model.weights(l).shape().iter().product()])
        .collect();
    let mut vel_b: Vec<Vec<f64>> = (0..layers)
        .map(|l| vec![0.0; model.weighted_layer(l).spec.bias_len().unwrap()])
        .collect();
    let images = train.images();
    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = images.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = model.backward(&x, &y)?;
            if !grads.finite {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: grads.loss,
                });
            }
            sum += grads.loss * chunk.len() as f64;
            for l in 0..layers {
                let w = model.float_weights_mut(l)?.data_mut();
                for ((wv, v), g) in w.iter_mut().zip(&mut vel_w[l]).zip(grads.weights[l].data()) {
                    *v = config.momentum * *v + g;
                    *wv -= config.learning_rate * *v;
                }
                if let Some(b) = model.bias_mut(l) {
                    for ((bv, v), g) in b.iter_mut().zip(&mut vel_b[l]).zip(&grads.biases[l]) {
                        *v = config.momentum * *v + g;
                        *bv -= config.learning_rate * *v;
                    }
                }
            }
        }
        let mean = sum / train.len() as f64;
        log::info!("epoch {epoch}: train loss {mean:.4}");
        epoch_losses.push(mean);
    }

    let train_accuracy = evaluate(&model, train)?.top1;
    let test_accuracy = evaluate(&model, test)?.top1;
    Ok(TrainOutcome {
        model,
        train_accuracy,
        test_accuracy,
        epoch_losses,
    })
}
