//! Generator backends: seed → style state, style state → image.

mod embed;
mod synthetic;

pub use embed::{EmbedGenerator, EmbedResponse};
pub use synthetic::{
    ChannelRole, GroundTruthEntry, GroundTruthMap, SyntheticConfig, SyntheticRenderer,
    CUE_CHANNEL, PRESENCE_CHANNEL,
};

use serde::{Deserialize, Serialize};

use crate::domain::{ChannelRef, ImageTensor, StyleState};
use crate::error::{Error, Result};
use crate::sut::Sut;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Band {
    Coarse,
    Middle,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Layer layout of a style-based generator plus the statistics needed for
/// truncation and noise scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTopology {
    pub layer_widths: Vec<usize>,
    pub layer_band: Vec<Band>,
    pub image_shape: ImageShape,
    /// Mean style s̄ used as the truncation anchor.
    pub mean_style: Vec<Vec<f64>>,
    /// Per-layer standard deviation of sampled style coordinates.
    pub style_std: Vec<f64>,
}

impl GeneratorTopology {
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_widths.len();
        if n == 0 {
            return Err(Error::Schema("topology has no layers".into()));
        }
        if self.layer_band.len() != n || self.mean_style.len() != n || self.style_std.len() != n {
            return Err(Error::Schema(
                "layer_band, mean_style and style_std must have one entry per layer".into(),
            ));
        }
        if self.layer_band.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Schema(
                "band assignment must be monotone coarse to fine".into(),
            ));
        }
        for (layer, (&w, mean)) in self.layer_widths.iter().zip(&self.mean_style).enumerate() {
            if w == 0 {
                return Err(Error::Topology {
                    layer,
                    reason: "zero width".into(),
                });
            }
            if mean.len() != w {
                return Err(Error::Topology {
                    layer,
                    reason: format!("mean style has {} entries, width is {w}", mean.len()),
                });
            }
        }
        if self.style_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Schema("style_std must be positive".into()));
        }
        Ok(())
    }

    pub fn total_channels(&self) -> usize {
        self.layer_widths.iter().sum()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len()
    }

    pub fn band_of(&self, layer: usize) -> Option<Band> {
        self.layer_band.get(layer).copied()
    }

    pub fn channels(&self) -> impl Iterator<Item = ChannelRef> + '_ {
        self.layer_widths
            .iter()
            .enumerate()
            .flat_map(|(l, &w)| (0..w).map(move |c| ChannelRef::new(l, c)))
    }

    /// Verifies that a style state has this topology's layer count and widths.
    pub fn check_state(&self, state: &StyleState) -> Result<()> {
        if state.layer_count() != self.layer_count() {
            return Err(Error::Topology {
                layer: state.layer_count().min(self.layer_count()),
                reason: format!(
                    "state has {} layers, generator has {}",
                    state.layer_count(),
                    self.layer_count()
                ),
            });
        }
        for (layer, (v, &w)) in state.vectors.iter().zip(&self.layer_widths).enumerate() {
            if v.len() != w {
                return Err(Error::Topology {
                    layer,
                    reason: format!("width {} but generator expects {w}", v.len()),
                });
            }
        }
        if let Some((layer, _)) = state
            .vectors
            .iter()
            .enumerate()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Topology {
                layer,
                reason: "non-finite coordinate".into(),
            });
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.layer_widths.iter().map(|&w| vec![0.0; w]).collect()
    }
}

/// A style-based generator. Instances are not assumed reentrant; the pipeline
/// builds one per worker.
pub trait Generator: Send + Sync {
    fn topology(&self) -> &GeneratorTopology;

    /// Untruncated style coordinates for `seed`.
    fn sample_raw(&self, seed: u64) -> Result<Vec<Vec<f64>>>;

    fn synthesize(&self, state: &StyleState) -> Result<ImageTensor>;

    fn differentiable(&self) -> bool {
        false
    }

    /// Vector-Jacobian product: pulls an image-space cotangent back to style space.
    fn style_vjp(&self, _state: &StyleState, _cotangent: &[f64]) -> Result<Vec<Vec<f64>>> {
        Err(Error::NotDifferentiable)
    }

    /// Samples a style state and applies linear truncation `s̄ + ψ·(s − s̄)`.
    fn sample_style_state(&self, seed: u64, truncation: f64) -> Result<StyleState> {
        if !(truncation > 0.0 && truncation <= 1.0) {
            return Err(Error::Validation(format!(
                "truncation psi={truncation} outside (0, 1]"
            )));
        }
        let raw = self.sample_raw(seed)?;
        let vectors = apply_truncation(&raw, &self.topology().mean_style, truncation)?;
        let state = StyleState::new(vectors, seed, truncation)?;
        self.topology().check_state(&state)?;
        Ok(state)
    }
}

pub fn apply_truncation(
    raw: &[Vec<f64>],
    mean: &[Vec<f64>],
    truncation: f64,
) -> Result<Vec<Vec<f64>>> {
    if raw.len() != mean.len() {
        return Err(Error::Shape("sample and mean style differ in layer count".into()));
    }
    raw.iter()
        .zip(mean)
        .enumerate()
        .map(|(layer, (s, m))| {
            if s.len() != m.len() {
                return Err(Error::Topology {
                    layer,
                    reason: "sample and mean style differ in width".into(),
                });
            }
            Ok(s.iter()
                .zip(m)
                .map(|(&x, &mu)| mu + truncation * (x - mu))
                .collect())
        })
        .collect()
}

/// `∂y[t]/∂s` for the composite `F_t ∘ G`, one backward pass through both.
pub fn gradient_of_composite(
    state: &StyleState,
    generator: &dyn Generator,
    sut: &dyn Sut,
    target: usize,
) -> Result<Vec<Vec<f64>>> {
    if !generator.differentiable() || !sut.capabilities().differentiable {
        return Err(Error::NotDifferentiable);
    }
    generator.topology().check_state(state)?;
    let image = generator.synthesize(state)?;
    let image_grad = sut.input_gradient(&image, target)?;
    if image_grad.len() != image.len() {
        return Err(Error::Shape(format!(
            "SUT input gradient has {} entries for an image of {}",
            image_grad.len(),
            image.len()
        )));
    }
    generator.style_vjp(state, &image_grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> GeneratorTopology {
        GeneratorTopology {
            layer_widths: vec![2, 1],
            layer_band: vec![Band::Coarse, Band::Fine],
            image_shape: ImageShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            mean_style: vec![vec![0.0, 0.0], vec![0.0]],
            style_std: vec![1.0, 1.0],
        }
    }

    #[test]
    fn check_state_names_offending_layer() {
        let t = topo();
        let bad = StyleState::new(vec![vec![0.0, 1.0], vec![1.0, 2.0]], 0, 1.0).unwrap();
        match t.check_state(&bad) {
            Err(Error::Topology { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
        let short = StyleState::new(vec![vec![0.0, 1.0]], 0, 1.0).unwrap();
        assert!(matches!(t.check_state(&short), Err(Error::Topology { .. })));
    }

    #[test]
    fn bands_must_be_monotone() {
        let mut t = topo();
        t.layer_band = vec![Band::Fine, Band::Coarse];
        assert!(t.validate().is_err());
    }
}
