//! Linear-embedding generator used for closed-form checks.
//!
//! `x = 0.5 + M · f(s)`, with `f` either the identity or a saturating tanh.
//! With the identity response and a linear SUT the composite is exactly
//! linear in the style state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Band, Generator, GeneratorTopology, ImageShape};
use crate::domain::{Colorspace, ImageTensor, StyleState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbedResponse {
    Linear,
    /// `scale · tanh(s / scale)`
    Tanh { scale: f64 },
}

impl EmbedResponse {
    fn value_and_slope(self, s: f64) -> (f64, f64) {
        match self {
            EmbedResponse::Linear => (s, 1.0),
            EmbedResponse::Tanh { scale } => {
                let t = (s / scale).tanh();
                (scale * t, 1.0 - t * t)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedGenerator {
    topology: GeneratorTopology,
    /// Row-major `[pixels·C, total_channels]`.
    matrix: Vec<f64>,
    response: EmbedResponse,
}

impl EmbedGenerator {
    pub fn new(topology: GeneratorTopology, matrix: Vec<f64>, response: EmbedResponse) -> Result<Self> {
        topology.validate()?;
        let shape = topology.image_shape;
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::Validation("image channels must be 1 or 3".into()));
        }
        let rows = shape.height * shape.width * shape.channels;
        if matrix.len() != rows * topology.total_channels() {
            return Err(Error::Shape(format!(
                "embedding matrix has {} entries, expected {}x{}",
                matrix.len(),
                rows,
                topology.total_channels()
            )));
        }
        Ok(Self {
            topology,
            matrix,
            response,
        })
    }

    /// One style channel that shifts every pixel of a grayscale image by `gain · s`.
    pub fn single_channel(height: usize, width: usize, gain: f64) -> Result<Self> {
        let topology = GeneratorTopology {
            layer_widths: vec![1],
            layer_band: vec![Band::Coarse],
            image_shape: ImageShape {
                height,
                width,
                channels: 1,
            },
            mean_style: vec![vec![0.0]],
            style_std: vec![1.0],
        };
        Self::new(topology, vec![gain; height * width], EmbedResponse::Linear)
    }

    /// Gaussian embedding with entries `gain · N(0, 1)` drawn from `seed`.
    /// Layers are split into equal-ish COARSE, MIDDLE and FINE thirds.
    pub fn random(
        layer_widths: Vec<usize>,
        image_shape: ImageShape,
        gain: f64,
        response: EmbedResponse,
        seed: u64,
    ) -> Result<Self> {
        let n = layer_widths.len();
        let layer_band = (0..n)
            .map(|i| match (3 * i) / n.max(1) {
                0 => Band::Coarse,
                1 => Band::Middle,
                _ => Band::Fine,
            })
            .collect();
        let topology = GeneratorTopology {
            mean_style: layer_widths.iter().map(|&w| vec![0.0; w]).collect(),
            style_std: vec![1.0; n],
            layer_widths,
            layer_band,
            image_shape,
        };
        let rows = image_shape.height * image_shape.width * image_shape.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..rows * topology.total_channels())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                gain * z
            })
            .collect();
        Self::new(topology, matrix, response)
    }

    fn colorspace(&self) -> Colorspace {
        if self.topology.image_shape.channels == 1 {
            Colorspace::Grayscale
        } else {
            Colorspace::Rgb
        }
    }
}

impl Generator for EmbedGenerator {
    fn topology(&self) -> &GeneratorTopology {
        &self.topology
    }

    fn sample_raw(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self
            .topology
            .mean_style
            .iter()
            .zip(&self.topology.style_std)
            .map(|(layer, &std)| {
                layer
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + std * z
                    })
                    .collect()
            })
            .collect())
    }

    fn synthesize(&self, state: &StyleState) -> Result<ImageTensor> {
        self.topology.check_state(state)?;
        let f: Vec<f64> = state
            .flatten()
            .into_iter()
            .map(|s| self.response.value_and_slope(s).0)
            .collect();
        let cols = f.len();
        let data = self
            .matrix
            .chunks_exact(cols)
            .map(|row| 0.5 + row.iter().zip(&f).map(|(m, v)| m * v).sum::<f64>())
            .collect();
        let shape = self.topology.image_shape;
        ImageTensor::new(shape.height, shape.width, self.colorspace(), data)
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn style_vjp(&self, state: &StyleState, cotangent: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.topology.check_state(state)?;
        let flat = state.flatten();
        let cols = flat.len();
        let rows = self.matrix.len() / cols;
        if cotangent.len() != rows {
            return Err(Error::Shape(format!(
                "cotangent has {} entries, image has {rows}",
                cotangent.len()
            )));
        }
        let f: Vec<f64> = flat.iter().map(|&s| self.response.value_and_slope(s).0).collect();
        let mut grad = vec![0.0; cols];
        for (row, &g) in self.matrix.chunks_exact(cols).zip(cotangent) {
            // Pixels outside [0, 1] are clamped and pass no gradient.
            let pixel = 0.5 + row.iter().zip(&f).map(|(m, v)| m * v).sum::<f64>();
            if !(0.0..=1.0).contains(&pixel) {
                continue;
            }
            for (acc, m) in grad.iter_mut().zip(row) {
                *acc += g * m;
            }
        }
        for (g, &s) in grad.iter_mut().zip(&flat) {
            *g *= self.response.value_and_slope(s).1;
        }
        StyleState::unflatten(&grad, &self.topology.layer_widths)
    }
}
