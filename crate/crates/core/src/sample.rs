//! The attacker's view of the data: a random test-set draw labelled by the
//! clean model's own predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AttackSample {
    pub inputs: Tensor,
    /// Clean-model argmax for each input, frozen at draw time.
    pub pseudo_targets: Vec<usize>,
    /// Positions of the drawn inputs in the source split.
    pub indices: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleInfo {
    pub seed: u64,
    pub size: usize,
}

impl AttackSample {
    pub fn len(&self) -> usize {
        self.pseudo_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_targets.is_empty()
    }

    pub fn info(&self) -> SampleInfo {
        SampleInfo {
            seed: self.seed,
            size: self.len(),
        }
    }

    /// Builds a sample from explicit inputs, labelling them with `clean`.
    pub fn from_inputs(inputs: Tensor, clean: &ModelGraph, seed: u64) -> Result<Self> {
        let pseudo_targets = clean.forward(&inputs)?.argmax_rows();
        let indices = (0..pseudo_targets.len()).collect();
        Ok(Self {
            inputs,
            pseudo_targets,
            indices,
            seed,
        })
    }
}

/// Uniform draw of `size` test inputs without replacement. Reads images
/// only; ground-truth labels stay untouched.
pub fn draw_attack_sample(
    test: &Dataset,
    size: usize,
    clean: &ModelGraph,
    seed: u64,
) -> Result<AttackSample> {
    if size == 0 {
        return Err(Error::Config("attack sample size must be positive".into()));
    }
    if size > test.len() {
        return Err(Error::Budget {
            budget: size,
            available: test.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, test.len(), size).into_vec();
    let inputs = test.images_at(&indices)?;
    let pseudo_targets = clean.forward(&inputs)?.argmax_rows();
    Ok(AttackSample {
        inputs,
        pseudo_targets,
        indices,
        seed,
    })
}
