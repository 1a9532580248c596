//! Channel-sensitivity screening and top-k candidate selection.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ChannelRef, StyleState};
use crate::error::{Error, Result};
use crate::genbackend::{gradient_of_composite, Band, Generator, GeneratorTopology};
use crate::sut::Sut;

pub const DEFAULT_SMOOTHGRAD_SAMPLES: usize = 10;
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.1;
pub const DEFAULT_FDA_STEP: f64 = 0.1;
pub const DEFAULT_K_COARSE_MID: usize = 15;
pub const DEFAULT_K_FINE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Grad,
    Smoothgrad,
    Fda,
}

impl Method {
    pub const NAMES: [&'static str; 3] = ["grad", "smoothgrad", "fda"];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "grad" => Ok(Method::Grad),
            "smoothgrad" => Ok(Method::Smoothgrad),
            "fda" => Ok(Method::Fda),
            other => Err(Error::Validation(format!(
                "unknown screening method {other:?}; valid methods: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Per-layer noise standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

/// Signed per-channel scores `α` for one target logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub scores: Vec<Vec<f64>>,
    pub method: Method,
    pub target: usize,
    pub params: MethodParams,
}

impl SensitivityMap {
    pub fn score(&self, ch: ChannelRef) -> Option<f64> {
        self.scores.get(ch.layer_id)?.get(ch.channel).copied()
    }

    fn check(&self, topology: &GeneratorTopology) -> Result<()> {
        if self.scores.len() != topology.layer_count() {
            return Err(Error::Shape(format!(
                "map has {} layers, topology {}",
                self.scores.len(),
                topology.layer_count()
            )));
        }
        for (layer, (row, &w)) in self.scores.iter().zip(&topology.layer_widths).enumerate() {
            if row.len() != w {
                return Err(Error::Topology {
                    layer,
                    reason: format!("map width {} but topology width {w}", row.len()),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "non-finite sensitivity score in layer {layer}"
                )));
            }
        }
        Ok(())
    }
}

fn target_logit(generator: &dyn Generator, sut: &dyn Sut, state: &StyleState, target: usize) -> Result<f64> {
    let logits = sut.forward(&generator.synthesize(state)?)?;
    logits.values.get(target).copied().ok_or_else(|| {
        Error::Validation(format!("target {target} out of range for K={}", logits.k()))
    })
}

/// `α = ∂y[t]/∂s` from one backward pass.
pub fn grad_saliency(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    target: usize,
) -> Result<SensitivityMap> {
    Ok(SensitivityMap {
        scores: gradient_of_composite(state, generator, sut, target)?,
        method: Method::Grad,
        target,
        params: MethodParams::default(),
    })
}

/// Default SmoothGrad noise: a fixed fraction of each layer's style spread.
pub fn default_sigma(topology: &GeneratorTopology) -> Vec<f64> {
    topology
        .style_std
        .iter()
        .map(|s| DEFAULT_SIGMA_FRACTION * s)
        .collect()
}

/// Mean gradient over `samples` copies of the state with Gaussian noise of
/// per-layer standard deviation `sigma[l]`.
pub fn smoothgrad(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    target: usize,
    samples: usize,
    sigma: &[f64],
    noise_seed: u64,
) -> Result<SensitivityMap> {
    if samples == 0 {
        return Err(Error::Validation("SmoothGrad needs N >= 1".into()));
    }
    if sigma.len() != state.layer_count() || sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Validation(
            "SmoothGrad sigma must be positive, one value per layer".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut acc = generator.topology().zeros_like();
    for _ in 0..samples {
        let noisy: Vec<Vec<f64>> = state
            .vectors
            .iter()
            .zip(sigma)
            .map(|(layer, &sd)| {
                layer
                    .iter()
                    .map(|&v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + sd * z
                    })
                    .collect()
            })
            .collect();
        let noisy = StyleState::new(noisy, state.seed, state.truncation)?;
        let g = gradient_of_composite(&noisy, generator, sut, target)?;
        for (a, row) in acc.iter_mut().zip(&g) {
            for (x, y) in a.iter_mut().zip(row) {
                *x += y;
            }
        }
    }
    for v in acc.iter_mut().flatten() {
        *v /= samples as f64;
    }
    Ok(SensitivityMap {
        scores: acc,
        method: Method::Smoothgrad,
        target,
        params: MethodParams {
            samples: Some(samples),
            sigma: Some(sigma.to_vec()),
            noise_seed: Some(noise_seed),
            step: None,
        },
    })
}

/// Forward differences `(y(s + Δ·e_c) − y(s)) / Δ`: one baseline forward
/// plus one per channel.
pub fn fda(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    target: usize,
    step: f64,
) -> Result<SensitivityMap> {
    if !(step.is_finite() && step != 0.0) {
        return Err(Error::Validation("FDA step must be finite and nonzero".into()));
    }
    generator.topology().check_state(state)?;
    let base = target_logit(generator, sut, state, target)?;
    let mut scores = generator.topology().zeros_like();
    for ch in state.channels().collect::<Vec<_>>() {
        let y = target_logit(generator, sut, &state.with_offset(ch, step)?, target)?;
        scores[ch.layer_id][ch.channel] = (y - base) / step;
    }
    Ok(SensitivityMap {
        scores,
        method: Method::Fda,
        target,
        params: MethodParams {
            step: Some(step),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub channel: ChannelRef,
    pub score: f64,
}

/// Top-k channels per layer, layers in order, each layer by descending |score|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub k_coarse_mid: usize,
    pub k_fine: usize,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelRef> + '_ {
        self.entries.iter().map(|c| c.channel)
    }

    /// Every channel of the topology whose score is nonzero, for exhaustive probing.
    pub fn all_nonzero(map: &SensitivityMap) -> Self {
        let entries = map
            .scores
            .iter()
            .enumerate()
            .flat_map(|(l, row)| {
                row.iter().enumerate().filter(|(_, s)| **s != 0.0).map(move |(c, &s)| Candidate {
                    channel: ChannelRef::new(l, c),
                    score: s,
                })
            })
            .collect();
        Self {
            entries,
            k_coarse_mid: usize::MAX,
            k_fine: usize::MAX,
        }
    }
}

/// Keeps the `k_coarse_mid` (COARSE and MIDDLE layers) or `k_fine` (FINE
/// layers) channels with the largest |score| in each layer. Ties go to the
/// lower channel index; zero scores are never selected.
pub fn select_candidates(
    map: &SensitivityMap,
    topology: &GeneratorTopology,
    k_coarse_mid: usize,
    k_fine: usize,
) -> Result<CandidateSet> {
    map.check(topology)?;
    let mut entries = Vec::new();
    for (layer, row) in map.scores.iter().enumerate() {
        let k = match topology.band_of(layer) {
            Some(Band::Fine) => k_fine,
            _ => k_coarse_mid,
        };
        let mut idx: Vec<usize> = (0..row.len()).filter(|&c| row[c] != 0.0).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .abs()
                .partial_cmp(&row[a].abs())
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        entries.extend(idx.into_iter().take(k).map(|c| Candidate {
            channel: ChannelRef::new(layer, c),
            score: row[c],
        }));
    }
    Ok(CandidateSet {
        entries,
        k_coarse_mid,
        k_fine,
    })
}
