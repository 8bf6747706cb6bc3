#![allow(dead_code)]

use bfa_core::layers::LayerSpec;
use bfa_core::model::{Layer, Weights};
use bfa_core::quant::QuantizedLayer;
use bfa_core::sample::AttackSample;
use bfa_core::{ModelGraph, Tensor};

/// One shared 1x1 conv weight applied to the pixels `+1` and `-1`, then a
/// fixed 2x2 read-out. With conv bias `conv_bias` the hidden units are
/// `relu(w + b)` and `relu(b - w)`, and the class-0 margin is
/// `0.5 h1 + 0.25 h2 - 2`.
pub fn kink_model(conv_code: i32, conv_bias: f64) -> ModelGraph {
    let conv = QuantizedLayer::from_parts(vec![1, 1, 1, 1], vec![conv_code], 1.0, 4).unwrap();
    let fc = QuantizedLayer::from_parts(vec![2, 2], vec![2, 1, 0, 0], 0.25, 4).unwrap();
    ModelGraph::new(
        vec![1, 1, 2],
        vec![
            Layer::new(
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
                Some(Weights::Quantized(conv)),
                Some(vec![conv_bias]),
            ),
            Layer::plain(LayerSpec::Relu),
            Layer::plain(LayerSpec::Flatten),
            Layer::new(
                LayerSpec::FullyConnected {
                    inputs: 2,
                    outputs: 2,
                },
                Some(Weights::Quantized(fc)),
                Some(vec![-2.0, 0.0]),
            ),
        ],
    )
    .unwrap()
}

pub fn kink_sample(model: &ModelGraph) -> AttackSample {
    let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
    AttackSample::from_inputs(x, model, 0).unwrap()
}

/// Small conv net on `[1, 6, 6]` inputs exercising every layer kind.
pub fn small_cnn_specs() -> (Vec<usize>, Vec<LayerSpec>) {
    (
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 4,
                kernel: 2,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected {
                inputs: 16,
                outputs: 5,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                inputs: 5,
                outputs: 3,
            },
        ],
    )
}

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
