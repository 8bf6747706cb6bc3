//! Progressive bit search.
//!
//! Each iteration computes weight gradients on the attack sample at the
//! current (already perturbed) state, then for every attackable layer:
//!
//! 1. ranks that layer's bits by `|dL/db|`, keeping only bits whose masked
//!    flip would actually change them, and elects the top `n_b`;
//! 2. flips the elected bits, measures the sample loss, and restores them.
//!
//! The layer with the highest trial loss wins and its flips are committed.
//! Ties go to the lower flat bit offset inside a layer and to the lower
//! layer index across layers, so replays are exact.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bits::{
    bit_coefficient, code_bit, flip_code_bit, flip_is_effective, BitAddress, BitPlane, Sign,
};
use crate::error::{Error, Result};
use crate::eval::{Evaluation, Validator};
use crate::model::{ForwardCache, GradientMap, ModelGraph, ParamMode};
use crate::sample::AttackSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Bits committed per iteration.
    pub n_b: usize,
    pub sample_size: usize,
    pub max_iterations: usize,
    /// Halt once validation top-1 is at or below this. `None` runs the
    /// full iteration budget.
    pub stop_accuracy: Option<f64>,
    /// Largest Hamming distance from the clean bits the attack may reach.
    pub hamming_budget: Option<u64>,
    pub seed: u64,
    /// Weighted-layer indices open to the attack; `None` means all.
    pub allowed_layers: Option<Vec<usize>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_b: 1,
            sample_size: 128,
            max_iterations: 100,
            stop_accuracy: Some(default_stop_accuracy(10)),
            hamming_budget: None,
            seed: 0,
            allowed_layers: None,
        }
    }
}

/// Random-guess accuracy plus one point.
pub fn default_stop_accuracy(classes: usize) -> f64 {
    1.0 / classes as f64 + 0.01
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_b == 0 {
            return Err(Error::Config("n_b must be at least 1".into()));
        }
        if self.sample_size == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        if let Some(s) = self.stop_accuracy {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("stop accuracy {s} outside [0, 1]")));
            }
        }
        if matches!(&self.allowed_layers, Some(l) if l.is_empty()) {
            return Err(Error::Config("allowed layer set is empty".into()));
        }
        Ok(())
    }

    fn layers(&self, model: &ModelGraph) -> Result<Vec<usize>> {
        match &self.allowed_layers {
            None => Ok((0..model.num_weighted()).collect()),
            Some(list) => {
                let mut list = list.clone();
                list.sort_unstable();
                list.dedup();
                if let Some(&bad) = list.iter().find(|&&l| l >= model.num_weighted()) {
                    return Err(Error::Config(format!(
                        "layer {bad} is not a weighted layer (model has {})",
                        model.num_weighted()
                    )));
                }
                Ok(list)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitFlip {
    pub address: BitAddress,
    pub before: bool,
    pub after: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub layer: usize,
    pub loss: f64,
}

/// One committed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub iteration: usize,
    pub layer: usize,
    pub flips: Vec<BitFlip>,
    /// Sample loss after the commit. Absent for baselines that do not
    /// look at the attack sample.
    pub sample_loss: Option<f64>,
    /// Sample loss before the commit.
    pub loss_before: Option<f64>,
    pub candidates: Vec<CandidateLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub record: FlipRecord,
    pub n_flip: usize,
    pub hamming: u64,
    pub validation: Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    ReachedThreshold,
    MaxIterations,
    HammingBudget,
    NoEffectiveFlip,
    NonFiniteLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub clean: Evaluation,
    pub clean_sample_loss: Option<f64>,
    pub steps: Vec<TraceStep>,
    pub status: AttackStatus,
}

impl AttackTrace {
    pub fn n_flip(&self) -> usize {
        self.steps.last().map_or(0, |s| s.n_flip)
    }

    pub fn hamming(&self) -> u64 {
        self.steps.last().map_or(0, |s| s.hamming)
    }

    pub fn final_eval(&self) -> &Evaluation {
        self.steps.last().map_or(&self.clean, |s| &s.validation)
    }

    /// Flip count at the first step whose top-1 is at or below `threshold`.
    pub fn flips_to_reach(&self, threshold: f64) -> Option<usize> {
        if self.clean.top1 <= threshold {
            return Some(0);
        }
        self.steps
            .iter()
            .find(|s| s.validation.top1 <= threshold)
            .map(|s| s.n_flip)
    }
}

/// Result of one layer's trial.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrial {
    pub layer: usize,
    pub elected: Vec<BitAddress>,
    /// Sample loss with the elected bits flipped, or `-inf` when the layer
    /// has no effective flip.
    pub loss: f64,
}

/// Bits of weighted layer `l` ranked by `|dL/db|` among mask-effective
/// flips; returns at most `n_b` addresses, best first.
pub fn elect_bits(
    model: &ModelGraph,
    l: usize,
    weight_grad: &Tensor,
    n_b: usize,
) -> Result<Vec<BitAddress>> {
    let q = model.quantized(l)?;
    if weight_grad.len() != q.len() {
        return Err(Error::Shape(format!(
            "gradient {:?} for layer {l} weights {:?}",
            weight_grad.shape(),
            q.shape()
        )));
    }
    let n_q = q.n_q();
    let delta = q.delta_w();
    // (score, flat offset) of every effective candidate
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for (k, &g) in weight_grad.data().iter().enumerate() {
        if g == 0.0 || g.is_nan() {
            continue;
        }
        let code = q.code(k);
        for i in 0..n_q {
            let bg = g * delta * bit_coefficient(i, n_q);
            if flip_is_effective(code_bit(code, i), Sign::of(bg)) {
                let offset = k * n_q as usize + (n_q - 1 - i) as usize;
                cands.push((bg.abs(), offset));
            }
        }
    }
    let rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
    };
    if cands.len() > n_b {
        cands.select_nth_unstable_by(n_b - 1, rank);
        cands.truncate(n_b);
    }
    cands.sort_unstable_by(rank);
    Ok(cands
        .into_iter()
        .map(|(_, off)| BitAddress {
            layer: l,
            weight: off / n_q as usize,
            bit: n_q - 1 - (off % n_q as usize) as u32,
        })
        .collect())
}

/// Toggles the given bits of one layer.
pub fn apply_flips(model: &mut ModelGraph, addrs: &[BitAddress]) -> Result<()> {
    for a in addrs {
        let q = model.quantized_mut(a.layer)?;
        let flipped = flip_code_bit(q.code(a.weight), a.bit, q.n_q());
        q.set_code(a.weight, flipped)?;
    }
    Ok(())
}

fn trial_loss(
    model: &ModelGraph,
    l: usize,
    sample: &AttackSample,
    cache: Option<&ForwardCache>,
) -> Result<f64> {
    let logits = match cache {
        Some(c) => {
            let idx = model.weighted_layers()[l];
            model.forward_from(idx, &c.inputs[idx])?
        }
        None => model.forward(&sample.inputs)?,
    };
    crate::model::cross_entropy(&logits, &sample.pseudo_targets)
}

fn in_layer_search_cached(
    model: &mut ModelGraph,
    l: usize,
    sample: &AttackSample,
    grads: &GradientMap,
    cache: Option<&ForwardCache>,
    n_b: usize,
) -> Result<LayerTrial> {
    let elected = elect_bits(model, l, &grads.weights[l], n_b)?;
    if elected.len() < n_b {
        return Ok(LayerTrial {
            layer: l,
            elected: Vec::new(),
            loss: f64::NEG_INFINITY,
        });
    }
    let saved: Vec<i32> = model.quantized(l)?.codes().to_vec();
    apply_flips(model, &elected)?;
    let loss = trial_loss(model, l, sample, cache);
    // restore whatever happened during evaluation
    let q = model.quantized_mut(l)?;
    for a in &elected {
        q.set_code(a.weight, saved[a.weight])?;
    }
    Ok(LayerTrial {
        layer: l,
        elected,
        loss: loss?,
    })
}

/// Elects layer `l`'s top-`n_b` effective bits from `grads`, measures the
/// sample loss with them flipped, and restores the layer bit-exactly.
pub fn in_layer_search(
    model: &mut ModelGraph,
    l: usize,
    sample: &AttackSample,
    grads: &GradientMap,
    n_b: usize,
) -> Result<LayerTrial> {
    in_layer_search_cached(model, l, sample, grads, None, n_b)
}

/// Index of the largest loss; the lowest index wins ties. Fails when every
/// entry is the `-inf` sentinel.
pub fn cross_layer_select(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best: Option<usize> = None;
    for (i, &v) in losses.iter().enumerate() {
        if v == f64::NEG_INFINITY {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > losses[b] || (losses[b].is_nan() && !v.is_nan()) => best = Some(i),
            _ => {}
        }
    }
    best.ok_or(Error::NoEffectiveFlip)
}

/// One search-and-commit round over the layers named by `config`.
pub fn pbs_iteration(
    model: &mut ModelGraph,
    sample: &AttackSample,
    config: &AttackConfig,
    iteration: usize,
) -> Result<FlipRecord> {
    model.require_mode(ParamMode::Quantized)?;
    config.validate()?;
    let layers = config.layers(model)?;
    let cache = model.forward_cached(&sample.inputs)?;
    let grads = model.backward_from_cache(&cache, &sample.pseudo_targets)?;
    if !grads.loss.is_finite() {
        return Err(Error::NonFiniteLoss(grads.loss));
    }
    let mut trials = Vec::with_capacity(layers.len());
    for &l in &layers {
        trials.push(in_layer_search_cached(
            model,
            l,
            sample,
            &grads,
            Some(&cache),
            config.n_b,
        )?);
    }
    let losses: Vec<f64> = trials.iter().map(|t| t.loss).collect();
    let winner = &trials[cross_layer_select(&losses)?];

    let q = model.quantized(winner.layer)?;
    let flips: Vec<BitFlip> = winner
        .elected
        .iter()
        .map(|&address| {
            let before = code_bit(q.code(address.weight), address.bit);
            BitFlip {
                address,
                before,
                after: !before,
            }
        })
        .collect();
    apply_flips(model, &winner.elected)?;

    Ok(FlipRecord {
        iteration,
        layer: winner.layer,
        flips,
        sample_loss: Some(winner.loss),
        loss_before: Some(grads.loss),
        candidates: trials
            .iter()
            .map(|t| CandidateLoss {
                layer: t.layer,
                loss: t.loss,
            })
            .collect(),
    })
}

/// Bit planes of every weighted layer.
pub fn model_planes(model: &ModelGraph) -> Result<Vec<BitPlane>> {
    (0..model.num_weighted())
        .map(|l| {
            let q = model.quantized(l)?;
            BitPlane::from_codes(q.codes(), q.n_q())
        })
        .collect()
}

/// Total number of differing bits across all layers.
pub fn hamming_distance(clean: &[BitPlane], perturbed: &[BitPlane]) -> Result<u64> {
    if clean.len() != perturbed.len() {
        return Err(Error::Topology(format!(
            "{} layers vs {}",
            clean.len(),
            perturbed.len()
        )));
    }
    clean.iter().zip(perturbed).map(|(a, b)| a.hamming(b)).sum()
}

/// SHA-256 over every layer's stored bits and step size.
pub fn model_bit_hash(model: &ModelGraph) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    for (l, plane) in model_planes(model)?.iter().enumerate() {
        plane.update_digest(&mut h);
        h.update(model.quantized(l)?.delta_w().to_le_bytes());
    }
    Ok(h.finalize().into())
}

/// Repeats [`pbs_iteration`] until validation accuracy drops to the stop
/// threshold, the iteration cap is hit, or the next commit could exceed
/// the Hamming budget. The validator is consulted once before the attack
/// and once after every commit.
pub fn run_attack(
    model: &mut ModelGraph,
    sample: &AttackSample,
    validator: &dyn Validator,
    config: &AttackConfig,
) -> Result<AttackTrace> {
    model.require_mode(ParamMode::Quantized)?;
    config.validate()?;
    let clean_planes = model_planes(model)?;
    let clean = validator.validate(model)?;
    let clean_sample_loss = model.loss(&sample.inputs, &sample.pseudo_targets)?;
    let reached = |e: &Evaluation| config.stop_accuracy.is_some_and(|s| e.top1 <= s);

    let mut steps: Vec<TraceStep> = Vec::new();
    let mut n_flip = 0;
    let status = loop {
        let last = steps.last().map_or(&clean, |s| &s.validation);
        if reached(last) {
            break AttackStatus::ReachedThreshold;
        }
        if !last.loss_is_finite() {
            break AttackStatus::NonFiniteLoss;
        }
        if steps.len() >= config.max_iterations {
            break AttackStatus::MaxIterations;
        }
        let hamming = steps.last().map_or(0, |s| s.hamming);
        if config
            .hamming_budget
            .is_some_and(|b| hamming + config.n_b as u64 > b)
        {
            break AttackStatus::HammingBudget;
        }
        let record = match pbs_iteration(model, sample, config, steps.len() + 1) {
            Ok(r) => r,
            Err(Error::NoEffectiveFlip) => break AttackStatus::NoEffectiveFlip,
            Err(Error::NonFiniteLoss(_)) => break AttackStatus::NonFiniteLoss,
            Err(e) => return Err(e),
        };
        n_flip += record.flips.len();
        let hamming = hamming_distance(&clean_planes, &model_planes(model)?)?;
        let validation = validator.validate(model)?;
        log::debug!(
            "iter {} layer {} n_flip {n_flip} D_B {hamming} top1 {:.4} sample loss {:?}",
            record.iteration,
            record.layer,
            validation.top1,
            record.sample_loss
        );
        steps.push(TraceStep {
            record,
            n_flip,
            hamming,
            validation,
        });
    };
    Ok(AttackTrace {
        clean,
        clean_sample_loss: Some(clean_sample_loss),
        steps,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use crate::model::{Layer, Weights};
    use crate::quant::QuantizedLayer;

    fn one_weight_model(code: i32, grad_sign: f64) -> (ModelGraph, Tensor) {
        let q = QuantizedLayer::from_parts(vec![1, 1], vec![code], 0.5, 4).unwrap();
        let m = ModelGraph::new(
            vec![1],
            vec![Layer::new(
                LayerSpec::FullyConnected {
                    inputs: 1,
                    outputs: 1,
                },
                Some(Weights::Quantized(q)),
                None,
            )],
        )
        .unwrap();
        (m, Tensor::new(vec![1, 1], vec![grad_sign]).unwrap())
    }

    #[test]
    fn msb_is_skipped_when_its_flip_is_a_no_op() {
        // code 0 = 0000, positive weight gradient: the MSB gradient is
        // negative and the bit is already 0, so b_2 wins.
        let (m, g) = one_weight_model(0, 1.0);
        let e = elect_bits(&m, 0, &g, 1).unwrap();
        assert_eq!(
            e,
            vec![BitAddress {
                layer: 0,
                weight: 0,
                bit: 2
            }]
        );
        let all = elect_bits(&m, 0, &g, 4).unwrap();
        let bits: Vec<u32> = all.iter().map(|a| a.bit).collect();
        assert_eq!(bits, vec![2, 1, 0]);
    }

    #[test]
    fn negative_code_elects_msb() {
        // code -8 = 1000 with positive gradient: clearing the MSB raises w
        let (m, g) = one_weight_model(-8, 1.0);
        let e = elect_bits(&m, 0, &g, 1).unwrap();
        assert_eq!(e[0].bit, 3);
    }

    #[test]
    fn zero_gradient_elects_nothing() {
        let (m, _) = one_weight_model(3, 0.0);
        let g = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(elect_bits(&m, 0, &g, 1).unwrap().is_empty());
    }

    #[test]
    fn cross_layer_examples() {
        assert_eq!(cross_layer_select(&[2.1, 3.5, 3.5, 1.0]).unwrap(), 1);
        assert_eq!(cross_layer_select(&[0.7]).unwrap(), 0);
        assert!(matches!(
            cross_layer_select(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::NoEffectiveFlip)
        ));
        assert!(matches!(
            cross_layer_select(&[]),
            Err(Error::EmptyCandidates)
        ));
        assert_eq!(cross_layer_select(&[f64::NEG_INFINITY, -5.0]).unwrap(), 1);
    }

    #[test]
    fn hamming_counts_and_cancels() {
        let (mut m, _) = one_weight_model(3, 1.0);
        let clean = model_planes(&m).unwrap();
        assert_eq!(hamming_distance(&clean, &clean).unwrap(), 0);
        let a = BitAddress {
            layer: 0,
            weight: 0,
            bit: 3,
        };
        apply_flips(&mut m, &[a]).unwrap();
        assert_eq!(
            hamming_distance(&clean, &model_planes(&m).unwrap()).unwrap(),
            1
        );
        apply_flips(&mut m, &[a]).unwrap();
        assert_eq!(
            hamming_distance(&clean, &model_planes(&m).unwrap()).unwrap(),
            0
        );
        assert!(hamming_distance(&clean, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::default();
        assert!(c.validate().is_ok());
        c.n_b = 0;
        assert!(c.validate().is_err());
        c.n_b = 1;
        c.stop_accuracy = Some(1.5);
        assert!(c.validate().is_err());
        c.stop_accuracy = Some(1.0);
        assert!(c.validate().is_ok());
        c.allowed_layers = Some(vec![]);
        assert!(c.validate().is_err());
    }
}
