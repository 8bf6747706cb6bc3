//! Layer-wise symmetric uniform weight quantizer.

use serde::{Deserialize, Serialize};

use crate::bits::{check_width, code_range};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tie rule for `round(w / delta_w)`. Only one is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub n_q: u32,
    pub rounding: Rounding,
}

impl QuantConfig {
    pub fn new(n_q: u32) -> Result<Self> {
        check_width(n_q)?;
        Ok(Self {
            n_q,
            rounding: Rounding::HalfAwayFromZero,
        })
    }
}

/// Integer codes plus the shared step size of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    shape: Vec<usize>,
    codes: Vec<i32>,
    delta_w: f64,
    n_q: u32,
}

impl QuantizedLayer {
    pub fn from_parts(shape: Vec<usize>, codes: Vec<i32>, delta_w: f64, n_q: u32) -> Result<Self> {
        check_width(n_q)?;
        if !(delta_w > 0.0 && delta_w.is_finite()) {
            return Err(Error::Config(format!(
                "step size {delta_w} must be positive"
            )));
        }
        if shape.iter().product::<usize>() != codes.len() {
            return Err(Error::Shape(format!(
                "{} codes for shape {shape:?}",
                codes.len()
            )));
        }
        let (lo, hi) = code_range(n_q);
        if let Some(&c) = codes.iter().find(|&&c| c < lo || c > hi) {
            return Err(Error::CodeOutOfRange {
                code: c as i64,
                n_q,
            });
        }
        Ok(Self {
            shape,
            codes,
            delta_w,
            n_q,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn delta_w(&self) -> f64 {
        self.delta_w
    }

    pub fn n_q(&self) -> u32 {
        self.n_q
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, k: usize) -> i32 {
        self.codes[k]
    }

    /// Overwrites one code. Attack paths go through here so the range
    /// invariant holds for any bit pattern.
    pub fn set_code(&mut self, k: usize, code: i32) -> Result<()> {
        let (lo, hi) = code_range(self.n_q);
        if code < lo || code > hi {
            return Err(Error::CodeOutOfRange {
                code: code as i64,
                n_q: self.n_q,
            });
        }
        self.codes[k] = code;
        Ok(())
    }

    pub fn dequantized_data(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| c as f64 * self.delta_w)
            .collect()
    }
}

/// `max|W| / (2^(n_q-1) - 1)`.
pub fn compute_step(weights: &Tensor, n_q: u32) -> Result<f64> {
    check_width(n_q)?;
    let max = weights.max_abs();
    if max == 0.0 || !max.is_finite() {
        return Err(Error::ZeroWeights);
    }
    Ok(max / code_range(n_q).1 as f64)
}

pub fn quantize_layer(weights: &Tensor, n_q: u32) -> Result<QuantizedLayer> {
    let delta_w = compute_step(weights, n_q)?;
    let limit = code_range(n_q).1 as f64;
    let codes = weights
        .data()
        .iter()
        // f64::round rounds half away from zero
        .map(|&w| (w / delta_w).round().clamp(-limit, limit) as i32)
        .collect();
    QuantizedLayer::from_parts(weights.shape().to_vec(), codes, delta_w, n_q)
}

pub fn dequantize(q: &QuantizedLayer) -> Tensor {
    Tensor::new(q.shape.clone(), q.dequantized_data()).expect("shape checked on construction")
}

/// Straight-through estimator: the rounding step passes gradients unchanged.
pub fn ste_backward(upstream: &Tensor) -> Tensor {
    upstream.clone()
}
