//! Control experiments: random bit flips on quantized weights, a single
//! exponent-bit flip on float weights, and PBS restricted to a layer set.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    model_planes, run_attack, AttackConfig, AttackStatus, AttackTrace, BitFlip, FlipRecord,
    TraceStep,
};
use crate::bits::{code_bit, flip_code_bit, BitAddress};
use crate::error::{Error, Result};
use crate::eval::Validator;
use crate::model::{ModelGraph, ParamMode};
use crate::sample::AttackSample;

/// Most significant exponent bit of an IEEE-754 single.
pub const TOP_EXPONENT_BIT: u32 = 30;
pub const SIGN_BIT: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    RandomQuantized,
    FloatExponent,
    LayerRestricted,
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomQuantized => "random-quantized",
            Self::FloatExponent => "float-exponent",
            Self::LayerRestricted => "layer-restricted",
        })
    }
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random-quantized" => Ok(Self::RandomQuantized),
            "float-exponent" | "exponent" => Ok(Self::FloatExponent),
            "layer-restricted" | "layers" => Ok(Self::LayerRestricted),
            _ => Err(Error::Config(format!("unknown baseline mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub mode: BaselineMode,
    pub budget: usize,
    pub allowed_layers: Option<Vec<usize>>,
    pub seed: u64,
    pub trials: usize,
    /// Float bit targeted in exponent mode.
    pub target_bit: u32,
}

impl BaselineConfig {
    pub fn new(mode: BaselineMode) -> Self {
        Self {
            mode,
            budget: 100,
            allowed_layers: None,
            seed: 0,
            trials: 5,
            target_bit: TOP_EXPONENT_BIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        match self.mode {
            BaselineMode::FloatExponent if self.target_bit > 31 => Err(Error::Config(format!(
                "bit {} outside a 32-bit float",
                self.target_bit
            ))),
            BaselineMode::FloatExponent => Ok(()),
            _ if self.budget == 0 => Err(Error::Config("budget must be at least 1".into())),
            BaselineMode::LayerRestricted
                if self.allowed_layers.as_ref().map_or(true, |l| l.is_empty()) =>
            {
                Err(Error::Config(
                    "layer-restricted mode needs a non-empty layer set".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

fn total_bits(model: &ModelGraph) -> Result<usize> {
    (0..model.num_weighted())
        .map(|l| model.quantized(l).map(|q| q.len() * q.n_q() as usize))
        .sum()
}

/// Maps a model-wide bit index onto a layer, weight and bit position,
/// walking layers in order with the usual MSB-first offsets inside each.
fn locate_bit(model: &ModelGraph, mut index: usize) -> Result<BitAddress> {
    for l in 0..model.num_weighted() {
        let q = model.quantized(l)?;
        let n_q = q.n_q() as usize;
        let bits = q.len() * n_q;
        if index < bits {
            return Ok(BitAddress {
                layer: l,
                weight: index / n_q,
                bit: (n_q - 1 - index % n_q) as u32,
            });
        }
        index -= bits;
    }
    Err(Error::Budget {
        budget: index,
        available: 0,
    })
}

/// Flips `budget` distinct bits chosen uniformly over the whole model,
/// validating after each one.
pub fn random_quantized_flips(
    model: &mut ModelGraph,
    budget: usize,
    seed: u64,
    validator: &dyn Validator,
) -> Result<AttackTrace> {
    model.require_mode(ParamMode::Quantized)?;
    let available = total_bits(model)?;
    if budget > available {
        return Err(Error::Budget { budget, available });
    }
    let clean_planes = model_planes(model)?;
    let clean = validator.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, available, budget);
    let mut steps = Vec::with_capacity(budget);
    for (n, index) in picks.iter().enumerate() {
        let address = locate_bit(model, index)?;
        let q = model.quantized_mut(address.layer)?;
        let code = q.code(address.weight);
        let before = code_bit(code, address.bit);
        q.set_code(address.weight, flip_code_bit(code, address.bit, q.n_q()))?;
        let hamming = crate::attack::hamming_distance(&clean_planes, &model_planes(model)?)?;
        steps.push(TraceStep {
            record: FlipRecord {
                iteration: n + 1,
                layer: address.layer,
                flips: vec![BitFlip {
                    address,
                    before,
                    after: !before,
                }],
                sample_loss: None,
                loss_before: None,
                candidates: Vec::new(),
            },
            n_flip: n + 1,
            hamming,
            validation: validator.validate(model)?,
        });
    }
    Ok(AttackTrace {
        clean,
        clean_sample_loss: None,
        steps,
        status: AttackStatus::MaxIterations,
    })
}

pub fn flip_f32_bit(v: f32, bit: u32) -> f32 {
    f32::from_bits(v.to_bits() ^ (1 << bit))
}

/// Rounds every float weight and bias to single precision, the storage
/// format the exponent-flip baseline attacks.
pub fn round_to_f32(model: &mut ModelGraph) -> Result<()> {
    model.require_mode(ParamMode::Float)?;
    for l in 0..model.num_weighted() {
        for w in model.float_weights_mut(l)?.data_mut() {
            *w = *w as f32 as f64;
        }
        if let Some(b) = model.bias_mut(l) {
            for v in b {
                *v = *v as f32 as f64;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatFlip {
    pub layer: usize,
    pub weight: usize,
    pub bit: u32,
    pub before: f32,
    pub after: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatFlipOutcome {
    pub trace: AttackTrace,
    pub flip: FloatFlip,
}

/// Rounds `model` to single precision, then sets bit `target_bit` of one
/// uniformly chosen nonzero weight whose bit is currently clear. The clean
/// evaluation in the trace is of the rounded model.
pub fn float_exponent_flip(
    model: &mut ModelGraph,
    seed: u64,
    target_bit: u32,
    validator: &dyn Validator,
) -> Result<FloatFlipOutcome> {
    if target_bit > 31 {
        return Err(Error::Config(format!(
            "bit {target_bit} outside a 32-bit float"
        )));
    }
    round_to_f32(model)?;
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for l in 0..model.num_weighted() {
        for (k, v) in model.weights(l).values().iter().enumerate() {
            let bits = (*v as f32).to_bits();
            if *v != 0.0 && bits & (1 << target_bit) == 0 {
                eligible.push((l, k));
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoEligibleWeight(target_bit));
    }
    let clean = validator.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (layer, weight) = eligible[rng.gen_range(0..eligible.len())];
    let w = &mut model.float_weights_mut(layer)?.data_mut()[weight];
    let before = *w as f32;
    let after = flip_f32_bit(before, target_bit);
    *w = after as f64;
    let validation = validator.validate(model)?;
    let status = if validation.loss_is_finite() {
        AttackStatus::MaxIterations
    } else {
        AttackStatus::NonFiniteLoss
    };
    let step = TraceStep {
        record: FlipRecord {
            iteration: 1,
            layer,
            flips: vec![BitFlip {
                address: BitAddress {
                    layer,
                    weight,
                    bit: target_bit,
                },
                before: false,
                after: true,
            }],
            sample_loss: None,
            loss_before: None,
            candidates: Vec::new(),
        },
        n_flip: 1,
        hamming: 1,
        validation,
    };
    Ok(FloatFlipOutcome {
        trace: AttackTrace {
            clean,
            clean_sample_loss: None,
            steps: vec![step],
            status,
        },
        flip: FloatFlip {
            layer,
            weight,
            bit: target_bit,
            before,
            after,
        },
    })
}

/// PBS with the cross-layer choice limited to `allowed_layers` and a fixed
/// budget of `budget` flips; no early stop.
pub fn layer_restricted_attack(
    model: &mut ModelGraph,
    allowed_layers: &[usize],
    budget: usize,
    sample: &AttackSample,
    n_b: usize,
    validator: &dyn Validator,
) -> Result<AttackTrace> {
    if allowed_layers.is_empty() {
        return Err(Error::Config("allowed layer set is empty".into()));
    }
    if n_b == 0 || budget < n_b {
        return Err(Error::Config(format!(
            "budget {budget} cannot hold one {n_b}-bit commit"
        )));
    }
    let config = AttackConfig {
        n_b,
        sample_size: sample.len(),
        max_iterations: budget / n_b,
        stop_accuracy: None,
        hamming_budget: None,
        seed: sample.seed,
        allowed_layers: Some(allowed_layers.to_vec()),
    };
    let trace = run_attack(model, sample, validator, &config)?;
    if trace.status == AttackStatus::NoEffectiveFlip && trace.steps.is_empty() {
        return Err(Error::NoEffectiveFlip);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_with_top_exponent_bit_set() {
        let v = flip_f32_bit(0.5, TOP_EXPONENT_BIT);
        assert_eq!(0.5f32.to_bits() >> 23, 0b0_0111_1110);
        assert_eq!(v.to_bits() >> 23, 0b0_1111_1110);
        assert_eq!(v, 2f32.powi(127));
        assert_eq!(v / 0.5, 2f32.powi(128));
    }

    #[test]
    fn top_exponent_flip_scales_small_weights_by_at_least_2_pow_64() {
        for v in [0.99f32, 0.5, -0.03, 1e-20, -1e-30] {
            let f = flip_f32_bit(v, TOP_EXPONENT_BIT);
            assert_eq!(f as f64, v as f64 * 2f64.powi(128), "{v}");
        }
        // biased exponent 127 becomes 255: infinity or NaN
        assert_eq!(flip_f32_bit(1.0, TOP_EXPONENT_BIT), f32::INFINITY);
        assert!(flip_f32_bit(-1.9, TOP_EXPONENT_BIT).is_nan());
    }

    #[test]
    fn sign_flip_negates() {
        assert_eq!(flip_f32_bit(0.25, SIGN_BIT), -0.25);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "random".parse::<BaselineMode>().unwrap(),
            BaselineMode::RandomQuantized
        );
        assert_eq!(
            "float-exponent".parse::<BaselineMode>().unwrap(),
            BaselineMode::FloatExponent
        );
        assert!("nope".parse::<BaselineMode>().is_err());
    }

    #[test]
    fn config_rules() {
        let mut c = BaselineConfig::new(BaselineMode::LayerRestricted);
        assert!(c.validate().is_err());
        c.allowed_layers = Some(vec![0]);
        assert!(c.validate().is_ok());
        c.budget = 0;
        assert!(c.validate().is_err());
        let mut e = BaselineConfig::new(BaselineMode::FloatExponent);
        e.target_bit = 32;
        assert!(e.validate().is_err());
    }
}
