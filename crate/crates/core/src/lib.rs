//! Bit-flip attack on quantized neural networks.
//!
//! Small conv/fc victims are trained in `f64`, quantized layer-wise into
//! `n_q`-bit two's-complement codes, and attacked by progressive bit
//! search: each iteration flips the bits whose loss gradient is steepest,
//! trial by trial per layer, and commits the layer that hurts most.
//! Random-flip and float exponent-flip baselines run through the same
//! trace and report path.

pub mod attack;
pub mod baseline;
pub mod bits;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod quant;
pub mod report;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GradientMap, ModelGraph, ParamMode};
pub use tensor::Tensor;
