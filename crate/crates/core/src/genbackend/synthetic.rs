//! Differentiable synthetic renderer with known semantics per channel.
//!
//! Three style layers. COARSE drives a foreground disc (presence, size,
//! aspect, horizontal position), MIDDLE a secondary corner blob plus a stripe
//! texture, FINE global tone (brightness, hue, contrast, vignette). Channels
//! beyond the first four of a layer drive small Gaussian detail bumps. Every
//! effect passes through sigmoids or tanh, so the image is smooth in every
//! style coordinate and the backward pass below is exact.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Band, Generator, GeneratorTopology, ImageShape};
use crate::domain::{ChannelRef, Colorspace, ImageTensor, StyleState};
use crate::error::{Error, Result};

/// The channel whose sign decides the ground-truth "object present" label.
pub const PRESENCE_CHANNEL: ChannelRef = ChannelRef::new(0, 0);
/// The secondary blob that scenarios correlate with the label.
pub const CUE_CHANNEL: ChannelRef = ChannelRef::new(1, 0);

const EDGE_SHARPNESS: f64 = 6.0;
const OUTPUT_GAIN: f64 = 4.0;
const STRIPE_FREQ: f64 = 2.0 * PI * 5.0;
const CUE_CENTER: (f64, f64) = (0.82, 0.18);
const BUMP_WIDTH: f64 = 0.07;
const BACKGROUND: [f64; 3] = [0.35, 0.40, 0.45];
const OBJECT_COLOR: [f64; 3] = [0.90, 0.80, 0.20];
const CUE_COLOR: [f64; 3] = [0.20, 0.55, 0.95];
const HUE_AXIS: [f64; 3] = [1.0, 0.0, -1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Square output side in pixels.
    pub image_size: usize,
    /// Widths of the COARSE, MIDDLE and FINE layers; each at least 4.
    pub layer_widths: Vec<usize>,
    /// Standard deviation of sampled style coordinates.
    pub style_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            layer_widths: vec![4, 4, 4],
            style_std: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRole {
    ObjectPresence,
    ObjectSize,
    ObjectAspect,
    ObjectPosition,
    CuePresence,
    CueSize,
    StripeAmplitude,
    StripePhase,
    Brightness,
    Hue,
    Contrast,
    Vignette,
    DetailBump,
}

impl ChannelRole {
    pub fn tag(self) -> &'static str {
        match self {
            ChannelRole::ObjectPresence => "object-presence",
            ChannelRole::ObjectSize => "object-size",
            ChannelRole::ObjectAspect => "object-aspect",
            ChannelRole::ObjectPosition => "object-position",
            ChannelRole::CuePresence => "cue-presence",
            ChannelRole::CueSize => "cue-size",
            ChannelRole::StripeAmplitude => "stripe-amplitude",
            ChannelRole::StripePhase => "stripe-phase",
            ChannelRole::Brightness => "illumination-brightness",
            ChannelRole::Hue => "background-hue",
            ChannelRole::Contrast => "illumination-contrast",
            ChannelRole::Vignette => "vignette",
            ChannelRole::DetailBump => "detail-bump",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub channel: ChannelRef,
    pub tag: String,
    pub task_relevant: bool,
}

/// Semantic tag and task relevance for every channel of the synthetic backend,
/// plus the rule that reads the ground-truth label off a style state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMap {
    pub task: String,
    pub entries: Vec<GroundTruthEntry>,
    pub label_channel: ChannelRef,
    pub label_threshold: f64,
}

impl GroundTruthMap {
    pub fn is_relevant(&self, channel: ChannelRef) -> Option<bool> {
        self.entries
            .iter()
            .find(|e| e.channel == channel)
            .map(|e| e.task_relevant)
    }

    pub fn tag(&self, channel: ChannelRef) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.channel == channel)
            .map(|e| e.tag.as_str())
    }

    /// Ground-truth class (1 = positive) of the image a state renders to.
    pub fn label_of(&self, state: &StyleState) -> Option<usize> {
        state
            .get(self.label_channel)
            .map(|v| usize::from(v > self.label_threshold))
    }

    /// Every topology channel must appear exactly once.
    pub fn validate_against(&self, topology: &GeneratorTopology) -> Result<()> {
        let mut seen: Vec<ChannelRef> = self.entries.iter().map(|e| e.channel).collect();
        seen.sort();
        let expected: Vec<ChannelRef> = topology.channels().collect();
        if seen != expected {
            return Err(Error::Schema(
                "ground-truth map must list every channel exactly once".into(),
            ));
        }
        Ok(())
    }
}

/// Built-in renderer backend.
#[derive(Debug, Clone)]
pub struct SyntheticRenderer {
    config: SyntheticConfig,
    topology: GeneratorTopology,
    bumps: Vec<Bump>,
}

#[derive(Debug, Clone, Copy)]
struct Bump {
    channel: ChannelRef,
    center: (f64, f64),
}

impl SyntheticRenderer {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        if config.layer_widths.len() != 3 {
            return Err(Error::Validation(
                "synthetic renderer has exactly three layers (coarse, middle, fine)".into(),
            ));
        }
        if config.layer_widths.iter().any(|&w| w < 4) {
            return Err(Error::Validation(
                "synthetic layer widths must be at least 4".into(),
            ));
        }
        if config.image_size < 8 {
            return Err(Error::Validation("image_size must be at least 8".into()));
        }
        if !(config.style_std.is_finite() && config.style_std > 0.0) {
            return Err(Error::Validation("style_std must be positive".into()));
        }
        let topology = GeneratorTopology {
            layer_widths: config.layer_widths.clone(),
            layer_band: vec![Band::Coarse, Band::Middle, Band::Fine],
            image_shape: ImageShape {
                height: config.image_size,
                width: config.image_size,
                channels: 3,
            },
            // Midpoint of the symmetric ±2σ anchor range.
            mean_style: config.layer_widths.iter().map(|&w| vec![0.0; w]).collect(),
            style_std: vec![config.style_std; 3],
        };
        topology.validate()?;
        let bumps = config
            .layer_widths
            .iter()
            .enumerate()
            .flat_map(|(l, &w)| (4..w).map(move |c| ChannelRef::new(l, c)))
            .map(|channel| Bump {
                channel,
                center: bump_center(channel),
            })
            .collect();
        Ok(Self {
            config,
            topology,
            bumps,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Low/high anchor values of a channel (mean ∓ 2σ).
    pub fn anchors(&self) -> (f64, f64) {
        (-2.0 * self.config.style_std, 2.0 * self.config.style_std)
    }

    pub fn role(&self, channel: ChannelRef) -> Option<ChannelRole> {
        let width = *self.config.layer_widths.get(channel.layer_id)?;
        if channel.channel >= width {
            return None;
        }
        use ChannelRole::*;
        let role = match (channel.layer_id, channel.channel) {
            (0, 0) => ObjectPresence,
            (0, 1) => ObjectSize,
            (0, 2) => ObjectAspect,
            (0, 3) => ObjectPosition,
            (1, 0) => CuePresence,
            (1, 1) => CueSize,
            (1, 2) => StripeAmplitude,
            (1, 3) => StripePhase,
            (2, 0) => Brightness,
            (2, 1) => Hue,
            (2, 2) => Contrast,
            (2, 3) => Vignette,
            _ => DetailBump,
        };
        Some(role)
    }

    /// Ground truth for the object-presence task: only the presence channel
    /// can change the label.
    pub fn ground_truth(&self) -> GroundTruthMap {
        let entries = self
            .topology
            .channels()
            .map(|channel| {
                let role = self.role(channel).expect("channel from own topology");
                GroundTruthEntry {
                    channel,
                    tag: role.tag().to_string(),
                    task_relevant: role == ChannelRole::ObjectPresence,
                }
            })
            .collect();
        GroundTruthMap {
            task: "object-presence".into(),
            entries,
            label_channel: PRESENCE_CHANNEL,
            label_threshold: 0.0,
        }
    }

    fn params(&self, state: &StyleState) -> Params {
        let s = &state.vectors;
        let bumps = self
            .bumps
            .iter()
            .map(|b| {
                let x = s[b.channel.layer_id][b.channel.channel];
                let th = (x / 5.0).tanh();
                (b.center, 0.08 * th, 0.08 * (1.0 - th * th) / 5.0)
            })
            .collect();
        Params::new(
            [s[0][0], s[0][1], s[0][2], s[0][3]],
            [s[1][0], s[1][1], s[1][2], s[1][3]],
            [s[2][0], s[2][1], s[2][2], s[2][3]],
            bumps,
        )
    }

    fn render(&self, p: &Params) -> Vec<f64> {
        let n = self.config.image_size;
        let mut out = Vec::with_capacity(n * n * 3);
        for i in 0..n {
            for j in 0..n {
                let px = Pixel::eval(p, coord(j, n), coord(i, n));
                out.extend_from_slice(&px.x);
            }
        }
        out
    }

    fn render_vjp(&self, p: &Params, cot: &[f64]) -> ParamGrads {
        let n = self.config.image_size;
        let mut g = ParamGrads::new(p.bumps.len());
        for i in 0..n {
            for j in 0..n {
                let (u, v) = (coord(j, n), coord(i, n));
                let base = (i * n + j) * 3;
                Pixel::eval(p, u, v).backward(p, u, v, &cot[base..base + 3], &mut g);
            }
        }
        g
    }
}

fn coord(idx: usize, n: usize) -> f64 {
    (idx as f64 + 0.5) / n as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bump_center(ch: ChannelRef) -> (f64, f64) {
    let mut z = ((ch.layer_id as u64) << 32 | ch.channel as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut next = || {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
        (x >> 11) as f64 / (1u64 << 53) as f64
    };
    (0.15 + 0.7 * next(), 0.15 + 0.7 * next())
}

/// Render parameters derived from the style state, with their derivatives
/// with respect to the driving style coordinate.
struct Params {
    presence: (f64, f64),
    radius: (f64, f64),
    aspect: (f64, f64),
    center_x: (f64, f64),
    cue: (f64, f64),
    cue_radius: (f64, f64),
    stripe_amp: (f64, f64),
    stripe_phase: (f64, f64),
    brightness: (f64, f64),
    hue: (f64, f64),
    contrast: (f64, f64),
    vignette: (f64, f64),
    /// (center, amplitude, d amplitude / d style)
    bumps: Vec<((f64, f64), f64, f64)>,
}

impl Params {
    fn new(coarse: [f64; 4], middle: [f64; 4], fine: [f64; 4], bumps: Vec<((f64, f64), f64, f64)>) -> Self {
        let sig = |x: f64, scale: f64| {
            let s = sigmoid(x / scale);
            (s, s * (1.0 - s) / scale)
        };
        let tanh = |x: f64, scale: f64| {
            let t = (x / scale).tanh();
            (t, (1.0 - t * t) / scale)
        };

        let presence = sig(coarse[0], 2.0);
        let (rs, drs) = sig(coarse[1], 4.0);
        let (at, dat) = tanh(coarse[2], 5.0);
        let aspect = (0.3 * at).exp();
        let (xt, dxt) = tanh(coarse[3], 5.0);
        let cue = sig(middle[0], 2.0);
        let (cs, dcs) = sig(middle[1], 4.0);
        let (ts, dts) = sig(middle[2], 3.0);
        let (bt, dbt) = tanh(fine[0], 6.0);
        let (ht, dht) = tanh(fine[1], 6.0);
        let (ct, dct) = tanh(fine[2], 6.0);
        let contrast = (0.35 * ct).exp();
        let (vs, dvs) = sig(fine[3], 3.0);

        Self {
            presence,
            radius: (0.12 + 0.12 * rs, 0.12 * drs),
            aspect: (aspect, aspect * 0.3 * dat),
            center_x: (0.5 + 0.12 * xt, 0.12 * dxt),
            cue,
            cue_radius: (0.07 + 0.05 * cs, 0.05 * dcs),
            stripe_amp: (0.12 * ts, 0.12 * dts),
            stripe_phase: (middle[3] / 4.0, 0.25),
            brightness: (0.2 * bt, 0.2 * dbt),
            hue: (0.15 * ht, 0.15 * dht),
            contrast: (contrast, contrast * 0.35 * dct),
            vignette: (0.6 * vs, 0.6 * dvs),
            bumps,
        }
    }
}

/// Adjoints of the render parameters.
struct ParamGrads {
    presence: f64,
    rx: f64,
    ry: f64,
    center_x: f64,
    cue: f64,
    cue_radius: f64,
    stripe_amp: f64,
    stripe_phase: f64,
    brightness: f64,
    hue: f64,
    contrast: f64,
    vignette: f64,
    bumps: Vec<f64>,
}

impl ParamGrads {
    fn new(n_bumps: usize) -> Self {
        Self {
            presence: 0.0,
            rx: 0.0,
            ry: 0.0,
            center_x: 0.0,
            cue: 0.0,
            cue_radius: 0.0,
            stripe_amp: 0.0,
            stripe_phase: 0.0,
            brightness: 0.0,
            hue: 0.0,
            contrast: 0.0,
            vignette: 0.0,
            bumps: vec![0.0; n_bumps],
        }
    }
}

/// Forward intermediates at one pixel, kept for the backward pass.
struct Pixel {
    du: f64,
    dv: f64,
    rx: f64,
    ry: f64,
    obj_mask: f64,
    alpha_obj: f64,
    cue_rho2: f64,
    cue_mask: f64,
    alpha_cue: f64,
    wave: f64,
    texture: f64,
    bump_gauss: Vec<f64>,
    l1: [f64; 3],
    l2: [f64; 3],
    z: [f64; 3],
    dist2: f64,
    vig: f64,
    x: [f64; 3],
}

impl Pixel {
    fn eval(p: &Params, u: f64, v: f64) -> Pixel {
        let rx = p.radius.0 * p.aspect.0;
        let ry = p.radius.0 / p.aspect.0;
        let du = u - p.center_x.0;
        let dv = v - 0.5;
        let rho2 = du * du / (rx * rx) + dv * dv / (ry * ry);
        let obj_mask = sigmoid(EDGE_SHARPNESS * (1.0 - rho2));
        let alpha_obj = p.presence.0 * obj_mask;

        let rc = p.cue_radius.0;
        let cue_rho2 = ((u - CUE_CENTER.0).powi(2) + (v - CUE_CENTER.1).powi(2)) / (rc * rc);
        let cue_mask = sigmoid(EDGE_SHARPNESS * (1.0 - cue_rho2));
        let alpha_cue = p.cue.0 * cue_mask;

        let wave = (STRIPE_FREQ * u + p.stripe_phase.0).sin();
        let texture = p.stripe_amp.0 * wave;

        let bump_gauss: Vec<f64> = p
            .bumps
            .iter()
            .map(|((bx, by), _, _)| {
                (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
            })
            .collect();
        let bump_sum: f64 = p
            .bumps
            .iter()
            .zip(&bump_gauss)
            .map(|((_, amp, _), g)| amp * g)
            .sum();

        let dist2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
        let vig = 1.0 - 2.0 * p.vignette.0 * dist2;

        let mut l1 = [0.0; 3];
        let mut l2 = [0.0; 3];
        let mut z = [0.0; 3];
        let mut x = [0.0; 3];
        for k in 0..3 {
            l1[k] = (BACKGROUND[k] + texture) * (1.0 - alpha_obj) + OBJECT_COLOR[k] * alpha_obj;
            l2[k] = l1[k] * (1.0 - alpha_cue) + CUE_COLOR[k] * alpha_cue + bump_sum;
            z[k] = p.contrast.0 * (l2[k] - 0.5) + 0.5 + p.brightness.0 + p.hue.0 * HUE_AXIS[k];
            x[k] = sigmoid(OUTPUT_GAIN * (z[k] * vig - 0.5));
        }
        Pixel {
            du,
            dv,
            rx,
            ry,
            obj_mask,
            alpha_obj,
            cue_rho2,
            cue_mask,
            alpha_cue,
            wave,
            texture,
            bump_gauss,
            l1,
            l2,
            z,
            dist2,
            vig,
            x,
        }
    }

    fn backward(&self, p: &Params, _u: f64, _v: f64, cot: &[f64], g: &mut ParamGrads) {
        let mut g_vig = 0.0;
        let mut g_alpha_obj = 0.0;
        let mut g_alpha_cue = 0.0;
        let mut g_texture = 0.0;
        let mut g_bump = 0.0;
        for k in 0..3 {
            let g_zv = cot[k] * OUTPUT_GAIN * self.x[k] * (1.0 - self.x[k]);
            let g_z = g_zv * self.vig;
            g_vig += g_zv * self.z[k];
            g.contrast += g_z * (self.l2[k] - 0.5);
            g.brightness += g_z;
            g.hue += g_z * HUE_AXIS[k];
            let g_l2 = g_z * p.contrast.0;
            g_alpha_cue += g_l2 * (CUE_COLOR[k] - self.l1[k]);
            g_bump += g_l2;
            let g_l1 = g_l2 * (1.0 - self.alpha_cue);
            g_alpha_obj += g_l1 * (OBJECT_COLOR[k] - BACKGROUND[k] - self.texture);
            g_texture += g_l1 * (1.0 - self.alpha_obj);
        }
        g.vignette += g_vig * (-2.0 * self.dist2);

        for (acc, gauss) in g.bumps.iter_mut().zip(&self.bump_gauss) {
            *acc += g_bump * gauss;
        }

        g.stripe_amp += g_texture * self.wave;
        g.stripe_phase += g_texture * p.stripe_amp.0 * (STRIPE_FREQ * _u + p.stripe_phase.0).cos();

        g.presence += g_alpha_obj * self.obj_mask;
        let g_mask = g_alpha_obj * p.presence.0;
        let g_rho2 = g_mask * (-EDGE_SHARPNESS * self.obj_mask * (1.0 - self.obj_mask));
        let (rx2, ry2) = (self.rx * self.rx, self.ry * self.ry);
        g.center_x += g_rho2 * (-2.0 * self.du / rx2);
        g.rx += g_rho2 * (-2.0 * self.du * self.du / (rx2 * self.rx));
        g.ry += g_rho2 * (-2.0 * self.dv * self.dv / (ry2 * self.ry));

        g.cue += g_alpha_cue * self.cue_mask;
        let g_cue_mask = g_alpha_cue * p.cue.0;
        let g_cue_rho2 = g_cue_mask * (-EDGE_SHARPNESS * self.cue_mask * (1.0 - self.cue_mask));
        g.cue_radius += g_cue_rho2 * (-2.0 * self.cue_rho2 / p.cue_radius.0);
    }
}

impl Generator for SyntheticRenderer {
    fn topology(&self) -> &GeneratorTopology {
        &self.topology
    }

    fn sample_raw(&self, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self
            .topology
            .mean_style
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&mu| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + self.config.style_std * z
                    })
                    .collect()
            })
            .collect())
    }

    fn synthesize(&self, state: &StyleState) -> Result<ImageTensor> {
        self.topology.check_state(state)?;
        let p = self.params(state);
        let n = self.config.image_size;
        ImageTensor::new(n, n, Colorspace::Rgb, self.render(&p))
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn style_vjp(&self, state: &StyleState, cotangent: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.topology.check_state(state)?;
        let n = self.config.image_size;
        if cotangent.len() != n * n * 3 {
            return Err(Error::Shape(format!(
                "cotangent has {} entries, image has {}",
                cotangent.len(),
                n * n * 3
            )));
        }
        let p = self.params(state);
        let g = self.render_vjp(&p, cotangent);

        let (r, a) = (p.radius.0, p.aspect.0);
        let g_r = g.rx * a + g.ry / a;
        let g_a = g.rx * r - g.ry * r / (a * a);

        let mut out = self.topology.zeros_like();
        out[0][0] = g.presence * p.presence.1;
        out[0][1] = g_r * p.radius.1;
        out[0][2] = g_a * p.aspect.1;
        out[0][3] = g.center_x * p.center_x.1;
        out[1][0] = g.cue * p.cue.1;
        out[1][1] = g.cue_radius * p.cue_radius.1;
        out[1][2] = g.stripe_amp * p.stripe_amp.1;
        out[1][3] = g.stripe_phase * p.stripe_phase.1;
        out[2][0] = g.brightness * p.brightness.1;
        out[2][1] = g.hue * p.hue.1;
        out[2][2] = g.contrast * p.contrast.1;
        out[2][3] = g.vignette * p.vignette.1;
        for ((bump, acc), (_, _, d_amp)) in self.bumps.iter().zip(&g.bumps).zip(&p.bumps) {
            out[bump.channel.layer_id][bump.channel.channel] = acc * d_amp;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn renderer() -> SyntheticRenderer {
        SyntheticRenderer::new(SyntheticConfig::default()).unwrap()
    }

    fn region_mean(img: &ImageTensor, cx: f64, cy: f64, radius: f64, inside: bool) -> f64 {
        let n = img.height();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                let d = ((coord(j, n) - cx).powi(2) + (coord(i, n) - cy).powi(2)).sqrt();
                if (d < radius) == inside {
                    sum += (0..3).map(|k| img.get(i, j, k)).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn presence_anchor_renders_disc_at_center() {
        let r = renderer();
        let (low, high) = r.anchors();
        let mut state = StyleState::new(r.topology().mean_style.clone(), 0, 1.0).unwrap();
        state.vectors[1][0] = low;
        state.vectors[0][0] = high;
        let present = r.synthesize(&state).unwrap();
        let inner = region_mean(&present, 0.5, 0.5, 0.08, true);
        let outer = region_mean(&present, 0.5, 0.5, 0.35, false);
        assert!(inner > outer + 0.1, "inner {inner} outer {outer}");

        state.vectors[0][0] = low;
        let absent = r.synthesize(&state).unwrap();
        let inner_absent = region_mean(&absent, 0.5, 0.5, 0.08, true);
        assert!(inner > inner_absent + 0.1);
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let r = renderer();
        let s = r.sample_style_state(7, 1.0).unwrap();
        let a = r.synthesize(&s).unwrap();
        let b = r.synthesize(&s).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut wild = s.clone();
        for v in wild.vectors.iter_mut().flatten() {
            *v *= 1e6;
        }
        let img = r.synthesize(&wild).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_layer_count_is_topology_error() {
        let r = renderer();
        let s = StyleState::new(vec![vec![0.0; 4], vec![0.0; 4]], 0, 1.0).unwrap();
        assert!(matches!(r.synthesize(&s), Err(Error::Topology { .. })));
    }

    #[test]
    fn truncation_rules() {
        let r = renderer();
        let full = r.sample_style_state(7, 1.0).unwrap();
        assert_eq!(full, r.sample_style_state(7, 1.0).unwrap());
        assert_eq!(full.vectors, r.sample_raw(7).unwrap());
        let half = r.sample_style_state(7, 0.5).unwrap();
        for (h, (f, m)) in half
            .flatten()
            .iter()
            .zip(full.flatten().iter().zip(r.topology().mean_style.concat()))
        {
            assert_eq!(*h, (m + f) / 2.0);
        }
        assert!(matches!(
            r.sample_style_state(7, 0.0),
            Err(Error::Validation(_))
        ));
        assert!(r.sample_style_state(7, 1.5).is_err());
    }

    #[test]
    fn ground_truth_covers_every_channel() {
        let r = SyntheticRenderer::new(SyntheticConfig {
            layer_widths: vec![5, 4, 6],
            ..Default::default()
        })
        .unwrap();
        let gt = r.ground_truth();
        gt.validate_against(r.topology()).unwrap();
        assert_eq!(gt.is_relevant(PRESENCE_CHANNEL), Some(true));
        assert_eq!(gt.is_relevant(CUE_CHANNEL), Some(false));
        assert_eq!(gt.tag(ChannelRef::new(2, 5)), Some("detail-bump"));
        assert_eq!(gt.entries.iter().filter(|e| e.task_relevant).count(), 1);
    }

    #[test]
    fn presence_flips_ground_truth_label_across_anchors() {
        let r = renderer();
        let gt = r.ground_truth();
        let (low, high) = r.anchors();
        let mut s = r.sample_style_state(3, 1.0).unwrap();
        s.vectors[0][0] = low;
        let neg = gt.label_of(&s).unwrap();
        s.vectors[0][0] = high;
        let pos = gt.label_of(&s).unwrap();
        assert_ne!(neg, pos);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(SyntheticRenderer::new(SyntheticConfig {
            layer_widths: vec![4, 4],
            ..Default::default()
        })
        .is_err());
        assert!(SyntheticRenderer::new(SyntheticConfig {
            layer_widths: vec![4, 3, 4],
            ..Default::default()
        })
        .is_err());
    }
}
