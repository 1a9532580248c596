//! Synthetic test-bed: renderer, a toy classifier trained on data where a
//! secondary blob co-occurs with the object, and the ground-truth map.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{predicted_label, ImageTensor, StyleState};
use crate::error::{Error, Result};
use crate::genbackend::{Generator, GroundTruthMap, SyntheticConfig, SyntheticRenderer, CUE_CHANNEL, PRESENCE_CHANNEL};
use crate::sut::{fit_logistic, FitConfig, LabeledImage, RegionPoolBackbone, Sut, ToyClassifier};

pub const MIN_TRAIN_ACCURACY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    /// Probability that the cue blob agrees with the label in training data.
    pub spurious_strength: f64,
    pub n_train: usize,
    pub rng_seed: u64,
    pub renderer: SyntheticConfig,
    /// Side of the classifier's pooling grid.
    pub grid: usize,
    pub fit: FitConfig,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            spurious_strength: 1.0,
            n_train: 400,
            rng_seed: 0,
            renderer: SyntheticConfig::default(),
            grid: 8,
            // Sparse fit: cells the label does not depend on get exact zeros.
            fit: FitConfig {
                lr: 0.5,
                l1: 3e-3,
                l2: 1e-4,
                iterations: 3000,
            },
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::Validation("spurious_strength must lie in [0, 1]".into()));
        }
        if self.n_train < 2 {
            return Err(Error::Validation("n_train must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub generator: SyntheticRenderer,
    pub sut: ToyClassifier,
    pub ground_truth: GroundTruthMap,
    pub train_accuracy: f64,
}

/// One training style state for label `positive`. The presence coordinate is
/// pushed clear of zero; the cue agrees with the label with probability
/// `strength` and is drawn from the prior otherwise.
pub fn training_state(
    generator: &SyntheticRenderer,
    positive: bool,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StyleState> {
    let seed = rng.next_u64();
    let mut vectors = generator.sample_raw(seed)?;
    let sign = if positive { 1.0 } else { -1.0 };
    let margin = |rng: &mut ChaCha8Rng| {
        let z: f64 = StandardNormal.sample(rng);
        2.0 + 3.0 * z.abs()
    };
    vectors[PRESENCE_CHANNEL.layer_id][PRESENCE_CHANNEL.channel] = sign * margin(rng);
    let cue = if rng.random::<f64>() < strength {
        sign * margin(rng)
    } else {
        let z: f64 = StandardNormal.sample(rng);
        generator.config().style_std * z
    };
    vectors[CUE_CHANNEL.layer_id][CUE_CHANNEL.channel] = cue;
    StyleState::new(vectors, seed, 1.0)
}

/// Draws `n` labeled training images from the scenario distribution.
pub fn sample_training_set(
    generator: &SyntheticRenderer,
    n: usize,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(StyleState, LabeledImage)>> {
    (0..n)
        .map(|_| {
            let positive = rng.random::<bool>();
            let state = training_state(generator, positive, strength, rng)?;
            let image = generator.synthesize(&state)?;
            Ok((
                state,
                LabeledImage {
                    image,
                    label: usize::from(positive),
                },
            ))
        })
        .collect()
}

/// [`sample_training_set`] with its own RNG seeded from `seed`.
pub fn sample_training_set_seeded(
    generator: &SyntheticRenderer,
    n: usize,
    strength: f64,
    seed: u64,
) -> Result<Vec<(StyleState, LabeledImage)>> {
    sample_training_set(generator, n, strength, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let generator = SyntheticRenderer::new(spec.renderer.clone())?;
    let ground_truth = generator.ground_truth();
    ground_truth.validate_against(generator.topology())?;
    let n = spec.renderer.image_size;
    let backbone = RegionPoolBackbone::new(n, n, 3, spec.grid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let data = sample_training_set(&generator, spec.n_train, spec.spurious_strength, &mut rng)?;
    let features: Vec<Vec<f64>> = data
        .iter()
        .map(|(_, it)| backbone.features(&it.image))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = data.iter().map(|(_, it)| it.label == 1).collect();
    let (w, b) = fit_logistic(&features, &labels, &spec.fit)?;
    let sut = ToyClassifier::new(backbone, vec![w], vec![b], 0)?;

    let images: Vec<&ImageTensor> = data.iter().map(|(_, it)| &it.image).collect();
    let mut correct = 0usize;
    for (img, &label) in images.iter().zip(&labels) {
        correct += usize::from((predicted_label(&sut.forward(img)?) == 1) == label);
    }
    let train_accuracy = correct as f64 / data.len() as f64;
    if train_accuracy < MIN_TRAIN_ACCURACY {
        return Err(Error::Scenario(format!(
            "toy classifier reached {train_accuracy:.3} train accuracy (< {MIN_TRAIN_ACCURACY}); \
             try another rng_seed or a larger n_train"
        )));
    }
    Ok(Scenario {
        spec: spec.clone(),
        generator,
        sut,
        ground_truth,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_states_respect_label_and_cue() {
        let g = SyntheticRenderer::new(SyntheticConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = training_state(&g, true, 1.0, &mut rng).unwrap();
            assert!(s.get(PRESENCE_CHANNEL).unwrap() >= 2.0);
            assert!(s.get(CUE_CHANNEL).unwrap() >= 2.0);
            let s = training_state(&g, false, 1.0, &mut rng).unwrap();
            assert!(s.get(PRESENCE_CHANNEL).unwrap() <= -2.0);
            assert!(s.get(CUE_CHANNEL).unwrap() <= -2.0);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = ScenarioSpec {
            spurious_strength: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
