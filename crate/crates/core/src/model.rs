//! Sequential model graph with forward inference and reverse-mode gradients.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, ConvGeom, LayerSpec};
use crate::quant::{quantize_layer, QuantizedLayer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Float,
    Quantized,
}

impl ParamMode {
    pub fn name(self) -> &'static str {
        match self {
            ParamMode::Float => "float",
            ParamMode::Quantized => "quantized",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Float(Tensor),
    Quantized(QuantizedLayer),
}

impl Weights {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weights::Float(t) => t.shape(),
            Weights::Quantized(q) => q.shape(),
        }
    }

    /// Real-valued view used by inference.
    pub fn values(&self) -> Cow<'_, [f64]> {
        match self {
            Weights::Float(t) => Cow::Borrowed(t.data()),
            Weights::Quantized(q) => Cow::Owned(q.dequantized_data()),
        }
    }

    fn mode(&self) -> ParamMode {
        match self {
            Weights::Float(_) => ParamMode::Float,
            Weights::Quantized(_) => ParamMode::Quantized,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<Weights>,
    pub bias: Option<Vec<f64>>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Option<Weights>, bias: Option<Vec<f64>>) -> Self {
        Self {
            spec,
            weights,
            bias,
        }
    }

    /// A parameter-free layer (relu, pool, flatten).
    pub fn plain(spec: LayerSpec) -> Self {
        Self::new(spec, None, None)
    }
}

/// Ordered stack of layers over a fixed per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    /// Model indices of the weighted layers, in order.
    weighted: Vec<usize>,
    mode: ParamMode,
}

/// Per-weighted-layer gradients of the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
    pub loss: f64,
    /// False when the loss or any gradient is NaN or infinite.
    pub finite: bool,
}

/// Activations recorded during a forward pass: `inputs[i]` is the input to
/// layer `i`, and `output` is the final logits.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
    pool_args: Vec<Option<Vec<usize>>>,
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut weighted = Vec::new();
        let mut mode = None;
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            let spec = &layer.spec;
            let next = spec
                .output_shape(&current)
                .ok_or_else(|| Error::LayerShape {
                    layer: i,
                    kind: spec.name(),
                    expected: expected_input(spec, &current),
                    actual: current.clone(),
                })?;
            match (spec.is_weighted(), &layer.weights) {
                (true, Some(w)) => {
                    let want = spec.weight_shape().unwrap();
                    if w.shape() != want.as_slice() {
                        return Err(Error::LayerShape {
                            layer: i,
                            kind: spec.name(),
                            expected: want,
                            actual: w.shape().to_vec(),
                        });
                    }
                    match mode {
                        None => mode = Some(w.mode()),
                        Some(m) if m != w.mode() => {
                            return Err(Error::Mode {
                                required: m.name(),
                                actual: w.mode().name(),
                            })
                        }
                        _ => {}
                    }
                    weighted.push(i);
                }
                (true, None) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({}) has no weights",
                        spec.name()
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({}) takes no weights",
                        spec.name()
                    )))
                }
                (false, None) => {}
            }
            if let Some(b) = &layer.bias {
                if spec.bias_len() != Some(b.len()) {
                    return Err(Error::Config(format!(
                        "layer {i} ({}) bias length {}",
                        spec.name(),
                        b.len()
                    )));
                }
            }
            current = next.clone();
            shapes.push(next);
        }
        if current.len() != 1 {
            return Err(Error::Shape(format!(
                "model output must be a class vector, got {current:?}"
            )));
        }
        if weighted.is_empty() {
            return Err(Error::Config("model has no weighted layer".into()));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            weighted,
            mode: mode.unwrap(),
        })
    }

    /// He-uniform weights and zero biases from a seeded generator.
    pub fn init(input_shape: Vec<usize>, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|spec| match spec.weight_shape() {
                Some(shape) => {
                    let n = shape.iter().product();
                    let bound = (6.0 / spec.fan_in() as f64).sqrt();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    let w = Tensor::new(shape, data)?;
                    let b = vec![0.0; spec.bias_len().unwrap()];
                    Ok(Layer::new(*spec, Some(Weights::Float(w)), Some(b)))
                }
                None => Ok(Layer::plain(*spec)),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(input_shape, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> ParamMode {
        self.mode
    }

    /// Model layer indices of the weighted layers.
    pub fn weighted_layers(&self) -> &[usize] {
        &self.weighted
    }

    pub fn num_weighted(&self) -> usize {
        self.weighted.len()
    }

    pub fn weighted_layer(&self, l: usize) -> &Layer {
        &self.layers[self.weighted[l]]
    }

    pub fn weights(&self, l: usize) -> &Weights {
        self.weighted_layer(l).weights.as_ref().unwrap()
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut Weights {
        let idx = self.weighted[l];
        self.layers[idx].weights.as_mut().unwrap()
    }

    /// Quantized store of weighted layer `l`.
    pub fn quantized(&self, l: usize) -> Result<&QuantizedLayer> {
        match self.weights(l) {
            Weights::Quantized(q) => Ok(q),
            Weights::Float(_) => Err(self.mode_error(ParamMode::Quantized)),
        }
    }

    pub fn quantized_mut(&mut self, l: usize) -> Result<&mut QuantizedLayer> {
        let err = self.mode_error(ParamMode::Quantized);
        match self.weights_mut(l) {
            Weights::Quantized(q) => Ok(q),
            Weights::Float(_) => Err(err),
        }
    }

    /// Float store of weighted layer `l`.
    pub fn float_weights_mut(&mut self, l: usize) -> Result<&mut Tensor> {
        let err = self.mode_error(ParamMode::Float);
        match self.weights_mut(l) {
            Weights::Float(t) => Ok(t),
            Weights::Quantized(_) => Err(err),
        }
    }

    pub fn bias_mut(&mut self, l: usize) -> Option<&mut Vec<f64>> {
        let idx = self.weighted[l];
        self.layers[idx].bias.as_mut()
    }

    pub fn require_mode(&self, mode: ParamMode) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(self.mode_error(mode))
        }
    }

    fn mode_error(&self, required: ParamMode) -> Error {
        Error::Mode {
            required: required.name(),
            actual: self.mode.name(),
        }
    }

    pub fn num_weights(&self) -> usize {
        (0..self.num_weighted())
            .map(|l| self.weights(l).shape().iter().product::<usize>())
            .sum()
    }

    /// Quantized copy of a float model; biases stay float.
    pub fn quantize(&self, n_q: u32) -> Result<Self> {
        self.require_mode(ParamMode::Float)?;
        let mut out = self.clone();
        for l in 0..self.num_weighted() {
            let q = match self.weights(l) {
                Weights::Float(t) => quantize_layer(t, n_q)?,
                Weights::Quantized(_) => unreachable!(),
            };
            *out.weights_mut(l) = Weights::Quantized(q);
        }
        out.mode = ParamMode::Quantized;
        Ok(out)
    }

    /// Float copy holding the real-valued view of every layer.
    pub fn to_float(&self) -> Self {
        let mut out = self.clone();
        for l in 0..self.num_weighted() {
            let w = self.weights(l);
            let t = Tensor::new(w.shape().to_vec(), w.values().into_owned()).unwrap();
            *out.weights_mut(l) = Weights::Float(t);
        }
        out.mode = ParamMode::Float;
        out
    }

    pub(crate) fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let shape = batch.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers[0].spec.name(),
                expected,
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn in_shape(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    /// Runs layer `i` on a batch; returns the output and any pool routing.
    fn layer_forward(&self, i: usize, x: &Tensor) -> (Tensor, Option<Vec<usize>>) {
        let layer = &self.layers[i];
        let n = x.rows();
        let in_shape = self.in_shape(i);
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&self.shapes[i]);
        let (data, arg) = match layer.spec {
            LayerSpec::FullyConnected { inputs, outputs } => {
                let w = layer.weights.as_ref().unwrap().values();
                let b = bias_or_zero(layer, outputs);
                (
                    layers::fc_forward(x.data(), &w, &b, n, inputs, outputs),
                    None,
                )
            }
            LayerSpec::Conv2d { .. } => {
                let w = layer.weights.as_ref().unwrap().values();
                let g = self.geom(i, n);
                let b = bias_or_zero(layer, g.out_c);
                (layers::conv_forward(x.data(), &w, &b, g), None)
            }
            LayerSpec::Relu => (layers::relu_forward(x.data()), None),
            LayerSpec::MaxPool { size, stride } => {
                let (y, arg) = layers::maxpool_forward(
                    x.data(),
                    n,
                    in_shape[0],
                    in_shape[1],
                    in_shape[2],
                    size,
                    stride,
                );
                (y, Some(arg))
            }
            LayerSpec::Flatten => (x.data().to_vec(), None),
        };
        (Tensor::new(out_shape, data).unwrap(), arg)
    }

    fn geom(&self, i: usize, batch: usize) -> ConvGeom {
        let LayerSpec::Conv2d {
            kernel,
            stride,
            padding,
            ..
        } = self.layers[i].spec
        else {
            unreachable!()
        };
        let inp = self.in_shape(i);
        let out = &self.shapes[i];
        ConvGeom {
            batch,
            in_c: inp[0],
            in_h: inp[1],
            in_w: inp[2],
            out_c: out[0],
            out_h: out[1],
            out_w: out[2],
            kernel,
            stride,
            padding,
        }
    }

    /// Logits `[batch, classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = Cow::Borrowed(batch);
        for i in 0..self.layers.len() {
            x = Cow::Owned(self.layer_forward(i, &x).0);
        }
        Ok(x.into_owned())
    }

    /// Forward pass keeping every layer input for reuse.
    pub fn forward_cached(&self, batch: &Tensor) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pool_args = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            let (y, arg) = self.layer_forward(i, &x);
            inputs.push(x);
            pool_args.push(arg);
            x = y;
        }
        Ok(ForwardCache {
            inputs,
            output: x,
            pool_args,
        })
    }

    /// Resumes inference at layer `start` from that layer's input
    /// activation.
    pub fn forward_from(&self, start: usize, activation: &Tensor) -> Result<Tensor> {
        let expected = self.in_shape(start);
        if activation.shape().len() != expected.len() + 1 || activation.shape()[1..] != *expected {
            return Err(Error::LayerShape {
                layer: start,
                kind: self.layers[start].spec.name(),
                expected: expected.to_vec(),
                actual: activation.shape().to_vec(),
            });
        }
        self.forward_span(start, self.layers.len(), activation)
    }

    /// Runs layers `start..end` on the input of layer `start`. The caller
    /// guarantees the activation shape.
    pub(crate) fn forward_span(
        &self,
        start: usize,
        end: usize,
        activation: &Tensor,
    ) -> Result<Tensor> {
        let mut x = Cow::Borrowed(activation);
        for i in start..end {
            x = Cow::Owned(self.layer_forward(i, &x).0);
        }
        Ok(x.into_owned())
    }

    pub fn loss(&self, batch: &Tensor, targets: &[usize]) -> Result<f64> {
        cross_entropy(&self.forward(batch)?, targets)
    }

    pub fn backward(&self, batch: &Tensor, targets: &[usize]) -> Result<GradientMap> {
        let cache = self.forward_cached(batch)?;
        self.backward_from_cache(&cache, targets)
    }

    /// Reverse pass over a recorded forward pass.
    pub fn backward_from_cache(
        &self,
        cache: &ForwardCache,
        targets: &[usize],
    ) -> Result<GradientMap> {
        let (loss, mut grad) = cross_entropy_with_grad(&cache.output, targets)?;
        let mut weights = vec![None; self.weighted.len()];
        let mut biases = vec![Vec::new(); self.weighted.len()];
        let first_weighted = self.weighted[0];
        for i in (0..self.layers.len()).rev() {
            let x = &cache.inputs[i];
            let n = x.rows();
            let need_dx = i > first_weighted;
            let layer = &self.layers[i];
            let dx = match layer.spec {
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let w = layer.weights.as_ref().unwrap().values();
                    let (dx, dw, db) =
                        layers::fc_backward(x.data(), &w, &grad, n, inputs, outputs, need_dx);
                    let l = self.weighted.iter().position(|&j| j == i).unwrap();
                    weights[l] = Some(Tensor::new(vec![outputs, inputs], dw)?);
                    biases[l] = db;
                    dx
                }
                LayerSpec::Conv2d { .. } => {
                    let w = layer.weights.as_ref().unwrap().values();
                    let g = self.geom(i, n);
                    let (dx, dw, db) = layers::conv_backward(x.data(), &w, &grad, g, need_dx);
                    let l = self.weighted.iter().position(|&j| j == i).unwrap();
                    let shape = layer.spec.weight_shape().unwrap();
                    weights[l] = Some(Tensor::new(shape, dw)?);
                    biases[l] = db;
                    dx
                }
                LayerSpec::Relu => need_dx.then(|| layers::relu_backward(x.data(), &grad)),
                LayerSpec::MaxPool { .. } => need_dx.then(|| {
                    layers::maxpool_backward(x.len(), cache.pool_args[i].as_ref().unwrap(), &grad)
                }),
                LayerSpec::Flatten => need_dx.then(|| grad.clone()),
            };
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        let weights: Vec<Tensor> = weights.into_iter().map(Option::unwrap).collect();
        let finite = loss.is_finite()
            && weights.iter().all(Tensor::all_finite)
            && biases.iter().flatten().all(|v| v.is_finite());
        Ok(GradientMap {
            weights,
            biases,
            loss,
            finite,
        })
    }
}

fn bias_or_zero(layer: &Layer, len: usize) -> Cow<'_, [f64]> {
    match &layer.bias {
        Some(b) => Cow::Borrowed(b.as_slice()),
        None => Cow::Owned(vec![0.0; len]),
    }
}

fn expected_input(spec: &LayerSpec, actual: &[usize]) -> Vec<usize> {
    match *spec {
        LayerSpec::FullyConnected { inputs, .. } => vec![inputs],
        LayerSpec::Conv2d { in_channels, .. } => {
            let mut v = vec![in_channels];
            v.extend(actual.iter().skip(1).take(2));
            v
        }
        _ => actual.to_vec(),
    }
}

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<usize> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::TargetOutOfRange { target: t, classes });
    }
    Ok(classes)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // propagates inf/NaN instead of producing a spurious finite loss
        return max + row.iter().sum::<f64>() * 0.0;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-softmax of the target classes. Non-finite logits give
/// a non-finite loss rather than an error.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            log_sum_exp(row) - row[t]
        })
        .sum();
    Ok(total / targets.len() as f64)
}

fn cross_entropy_with_grad(logits: &Tensor, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let classes = check_targets(logits, targets)?;
    let n = targets.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        total += lse - row[t];
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (j, (gv, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z - lse).exp();
            *gv = (p - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}
