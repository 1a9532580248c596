//! Domain types shared by every stage of the probing pipeline.

use std::fmt;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor_io;

/// Address of a single style channel: `(layer, channel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelRef {
    pub layer_id: usize,
    pub channel: usize,
}

impl ChannelRef {
    pub const fn new(layer_id: usize, channel: usize) -> Self {
        Self { layer_id, channel }
    }
}

impl fmt::Display for ChannelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}C{}", self.layer_id, self.channel)
    }
}

/// Per-layer style vectors for one seed; the unit being perturbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleState {
    pub vectors: Vec<Vec<f64>>,
    pub seed: u64,
    pub truncation: f64,
}

impl StyleState {
    pub fn new(vectors: Vec<Vec<f64>>, seed: u64, truncation: f64) -> Result<Self> {
        let state = Self {
            vectors,
            seed,
            truncation,
        };
        state.validate()?;
        Ok(state)
    }

    /// Checks the structural invariants: nonempty, finite, ψ ∈ (0, 1].
    pub fn validate(&self) -> Result<()> {
        if self.vectors.is_empty() {
            return Err(Error::Schema("style state has no layers".into()));
        }
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return Err(Error::Schema(format!(
                "truncation {} outside (0, 1]",
                self.truncation
            )));
        }
        for (layer, v) in self.vectors.iter().enumerate() {
            if v.is_empty() {
                return Err(Error::Schema(format!("layer {layer} has zero width")));
            }
            if let Some(c) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::Encode(format!(
                    "non-finite value at layer {layer}, channel {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.vectors.iter().map(Vec::len).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.vectors.iter().map(Vec::len).sum()
    }

    pub fn get(&self, ch: ChannelRef) -> Option<f64> {
        self.vectors.get(ch.layer_id)?.get(ch.channel).copied()
    }

    /// Copy of this state with exactly one coordinate shifted by `delta`.
    pub fn with_offset(&self, ch: ChannelRef, delta: f64) -> Result<StyleState> {
        let mut out = self.clone();
        let slot = out
            .vectors
            .get_mut(ch.layer_id)
            .and_then(|v| v.get_mut(ch.channel))
            .ok_or_else(|| Error::Validation(format!("channel {ch} out of range")))?;
        *slot += delta;
        Ok(out)
    }

    /// All channel addresses in (layer, channel) order.
    pub fn channels(&self) -> impl Iterator<Item = ChannelRef> + '_ {
        self.vectors
            .iter()
            .enumerate()
            .flat_map(|(l, v)| (0..v.len()).map(move |c| ChannelRef::new(l, c)))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.vectors.iter().flatten().copied().collect()
    }

    /// Splits a flat coordinate list back into layers of the given widths.
    pub fn unflatten(flat: &[f64], widths: &[usize]) -> Result<Vec<Vec<f64>>> {
        let total: usize = widths.iter().sum();
        if flat.len() != total {
            return Err(Error::Shape(format!(
                "expected {total} style coordinates, got {}",
                flat.len()
            )));
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in widths {
            out.push(flat[offset..offset + w].to_vec());
            offset += w;
        }
        Ok(out)
    }
}

const STYLE_MAGIC: &[u8; 8] = b"CPSTYLE1";

/// Binary encoding of a style state: magic, seed, ψ, layer count, then
/// `(width, f64 values)` per layer, all little-endian. Round-trips bit-exactly.
pub fn serialize_style_state(state: &StyleState) -> Result<Vec<u8>> {
    state.validate()?;
    let mut out = Vec::with_capacity(28 + 8 * state.total_channels() + 4 * state.layer_count());
    out.extend_from_slice(STYLE_MAGIC);
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&state.truncation.to_le_bytes());
    out.extend_from_slice(&(state.layer_count() as u32).to_le_bytes());
    for v in &state.vectors {
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn deserialize_style_state(bytes: &[u8]) -> Result<StyleState> {
    let header = |reason: &str| Error::Decode {
        layer: None,
        reason: reason.to_string(),
    };
    if bytes.len() < 28 {
        return Err(header("style header truncated"));
    }
    if &bytes[..8] != STYLE_MAGIC {
        return Err(header("bad style magic"));
    }
    let seed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let truncation = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let n_layers = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    if n_layers == 0 {
        return Err(Error::Schema("style state has no layers".into()));
    }
    let mut pos = 28;
    let mut vectors = Vec::with_capacity(n_layers.min(1024));
    for layer in 0..n_layers {
        let decode = |reason: String| Error::Decode {
            layer: Some(layer),
            reason,
        };
        let width_bytes = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| decode("width field truncated".into()))?;
        let width = u32::from_le_bytes(width_bytes.try_into().unwrap()) as usize;
        pos += 4;
        let end = width
            .checked_mul(8)
            .and_then(|n| n.checked_add(pos))
            .ok_or_else(|| decode("width overflows".into()))?;
        let body = bytes
            .get(pos..end)
            .ok_or_else(|| decode(format!("expected {width} values, payload truncated")))?;
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(c) = values.iter().position(|x| !x.is_finite()) {
            return Err(decode(format!("non-finite value at channel {c}")));
        }
        if values.is_empty() {
            return Err(decode("zero-width layer".into()));
        }
        vectors.push(values);
        pos = end;
    }
    if pos != bytes.len() {
        return Err(header("trailing bytes after last layer"));
    }
    let state = StyleState {
        vectors,
        seed,
        truncation,
    };
    state.validate()?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Colorspace {
    Rgb,
    Grayscale,
}

impl Colorspace {
    pub fn channels(self) -> usize {
        match self {
            Colorspace::Rgb => 3,
            Colorspace::Grayscale => 1,
        }
    }
}

/// `H×W×C` image with values in `[0, 1]`, row-major, channel-interleaved.
///
/// Values are held as f64 so gradient checks through the renderer stay
/// meaningful; serialization narrows to the f32 tensor interchange format.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    colorspace: Colorspace,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, colorspace: Colorspace, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        let expected = height * width * colorspace.channels();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{} image needs {expected} values, got {}",
                colorspace.channels(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            colorspace,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, colorspace: Colorspace, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            colorspace,
            vec![value; height * width * colorspace.channels()],
        )
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        colorspace: Colorspace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let c = colorspace.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for k in 0..c {
                    data.push(f(y, x, k));
                }
            }
        }
        Self::new(height, width, colorspace, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }
    pub fn channels(&self) -> usize {
        self.colorspace.channels()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels()]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, k: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + k]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    /// Rec. 601 luma; grayscale images pass through.
    pub fn to_luma(&self) -> ImageTensor {
        match self.colorspace {
            Colorspace::Grayscale => self.clone(),
            Colorspace::Rgb => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                    .collect();
                ImageTensor {
                    height: self.height,
                    width: self.width,
                    colorspace: Colorspace::Grayscale,
                    data,
                }
            }
        }
    }

    pub fn to_rgb(&self) -> ImageTensor {
        match self.colorspace {
            Colorspace::Rgb => self.clone(),
            Colorspace::Grayscale => ImageTensor {
                height: self.height,
                width: self.width,
                colorspace: Colorspace::Rgb,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
        }
    }

    pub fn to_tensor_bytes(&self) -> Result<Vec<u8>> {
        tensor_io::encode_tensor(&self.shape(), &self.data)
    }

    pub fn from_tensor_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, values) = tensor_io::decode_tensor(bytes)?;
        Self::from_shape_values(&shape, &values)
    }

    pub(crate) fn from_shape_values(shape: &[usize], values: &[f32]) -> Result<Self> {
        let colorspace = match shape {
            [_, _, 3] => Colorspace::Rgb,
            [_, _, 1] => Colorspace::Grayscale,
            _ => return Err(Error::Shape(format!("image tensor shape {shape:?}"))),
        };
        Self::new(
            shape[0],
            shape[1],
            colorspace,
            values.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let rgb = self.to_rgb();
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let base = (y as usize * self.width + x as usize) * 3;
            image::Rgb([
                quantize(rgb.data[base]),
                quantize(rgb.data[base + 1]),
                quantize(rgb.data[base + 2]),
            ])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(h as usize, w as usize, Colorspace::Rgb, data)
    }

    /// Horizontal concatenation; all parts must share the height and are promoted to RGB.
    pub fn hstack(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let h = first.height;
        if parts.iter().any(|p| p.height != h) {
            return Err(Error::Shape("hstack parts differ in height".into()));
        }
        let rgb: Vec<ImageTensor> = parts.iter().map(|p| p.to_rgb()).collect();
        let width: usize = rgb.iter().map(|p| p.width).sum();
        let mut data = Vec::with_capacity(h * width * 3);
        for y in 0..h {
            for p in &rgb {
                let row = y * p.width * 3;
                data.extend_from_slice(&p.data[row..row + p.width * 3]);
            }
        }
        ImageTensor::new(h, width, Colorspace::Rgb, data)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Serialize, Deserialize)]
struct ImageWire {
    height: usize,
    width: usize,
    colorspace: Colorspace,
    /// Base64 of the f32 tensor interchange encoding.
    tensor: String,
}

impl Serialize for ImageTensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let bytes = self.to_tensor_bytes().map_err(serde::ser::Error::custom)?;
        ImageWire {
            height: self.height,
            width: self.width,
            colorspace: self.colorspace,
            tensor: BASE64.encode(bytes),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ImageTensor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = ImageWire::deserialize(deserializer)?;
        let bytes = BASE64
            .decode(wire.tensor.as_bytes())
            .map_err(serde::de::Error::custom)?;
        let img = ImageTensor::from_tensor_bytes(&bytes).map_err(serde::de::Error::custom)?;
        if img.height != wire.height || img.width != wire.width || img.colorspace != wire.colorspace
        {
            return Err(serde::de::Error::custom(
                "image header disagrees with tensor",
            ));
        }
        Ok(img)
    }
}

/// Unnormalized SUT scores plus the index of the class under analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub values: Vec<f64>,
    pub target_index: usize,
}

impl LogitVector {
    pub fn new(values: Vec<f64>, target_index: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("logit vector must have K >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("logits must be finite".into()));
        }
        if target_index >= values.len() {
            return Err(Error::Validation(format!(
                "target index {target_index} out of range for K={}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            target_index,
        })
    }

    pub fn binary(value: f64) -> Result<Self> {
        Self::new(vec![value], 0)
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn target_value(&self) -> f64 {
        self.values[self.target_index]
    }

    pub fn with_target(mut self, target_index: usize) -> Result<Self> {
        if target_index >= self.values.len() {
            return Err(Error::Validation(format!(
                "target index {target_index} out of range for K={}",
                self.values.len()
            )));
        }
        self.target_index = target_index;
        Ok(self)
    }

    /// Decision margin: the single logit for binary outputs, top-1 minus top-2 otherwise.
    pub fn margin(&self) -> f64 {
        if self.values.len() == 1 {
            return self.values[0];
        }
        let mut top1 = f64::NEG_INFINITY;
        let mut top2 = f64::NEG_INFINITY;
        for &v in &self.values {
            if v > top1 {
                top2 = top1;
                top1 = v;
            } else if v > top2 {
                top2 = v;
            }
        }
        top1 - top2
    }
}

/// Binary (K=1): `1` when the logit is strictly positive, else `0`.
/// Multiclass: argmax, ties broken by the lowest index.
pub fn predicted_label(logits: &LogitVector) -> usize {
    if logits.values.len() == 1 {
        return usize::from(logits.values[0] > 0.0);
    }
    let mut best = 0;
    for (i, &v) in logits.values.iter().enumerate().skip(1) {
        if v > logits.values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeatureLabel {
    Relevant,
    Spurious,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeVerdict {
    Influential,
    Misclassified,
    NoEffect,
}

/// Outcome of bisecting a flipping perturbation down to the decision boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRefinement {
    pub delta_star: f64,
    pub margin_at_star: f64,
    pub iterations: usize,
    pub tolerance: f64,
    /// Set when the iteration budget ran out before the margin reached tolerance.
    pub flagged: bool,
}

/// One channel perturbation and what the oracle made of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub channel: ChannelRef,
    pub delta: f64,
    pub original_image: ImageTensor,
    pub perturbed_image: ImageTensor,
    pub original_logits: LogitVector,
    pub perturbed_logits: LogitVector,
    pub verdict: ProbeVerdict,
    pub refined_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryRefinement>,
}

impl ProbeResult {
    pub fn is_recorded(&self) -> bool {
        self.verdict != ProbeVerdict::NoEffect
    }
}

/// A backend's answer to "did the task attribute change between these two images?".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairVote {
    RelevantChange,
    NoRelevantChange,
    Ambiguous,
}

/// Relevant/spurious label for one influential channel, with the votes behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVerdict {
    pub channel: ChannelRef,
    pub label: FeatureLabel,
    pub votes: Vec<PairVote>,
    pub n_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_layer_state_round_trips() {
        let s = StyleState::new(vec![vec![0.0], vec![1.0, 2.0]], 3, 1.0).unwrap();
        let bytes = serialize_style_state(&s).unwrap();
        assert_eq!(deserialize_style_state(&bytes).unwrap(), s);
    }

    #[test]
    fn empty_layer_list_is_schema_error() {
        let s = StyleState {
            vectors: vec![],
            seed: 0,
            truncation: 1.0,
        };
        assert!(matches!(serialize_style_state(&s), Err(Error::Schema(_))));
    }

    #[test]
    fn nan_is_encode_error() {
        let s = StyleState {
            vectors: vec![vec![0.0, f64::NAN]],
            seed: 0,
            truncation: 1.0,
        };
        assert!(matches!(serialize_style_state(&s), Err(Error::Encode(_))));
    }

    #[test]
    fn corrupt_payload_names_layer() {
        let s = StyleState::new(vec![vec![0.0], vec![1.0, 2.0]], 3, 1.0).unwrap();
        let bytes = serialize_style_state(&s).unwrap();
        match deserialize_style_state(&bytes[..bytes.len() - 3]) {
            Err(Error::Decode { layer, .. }) => assert_eq!(layer, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
        let mut nan = bytes.clone();
        let off = nan.len() - 8;
        nan[off..].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = deserialize_style_state(&nan).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn predicted_label_rules() {
        assert_eq!(predicted_label(&LogitVector::binary(0.3).unwrap()), 1);
        assert_eq!(predicted_label(&LogitVector::binary(-0.3).unwrap()), 0);
        assert_eq!(predicted_label(&LogitVector::binary(0.0).unwrap()), 0);
        let l = LogitVector::new(vec![1.0, 4.0, 4.0], 0).unwrap();
        assert_eq!(predicted_label(&l), 1);
    }

    #[test]
    fn margin_forms() {
        assert_eq!(LogitVector::binary(-3.0).unwrap().margin(), -3.0);
        assert_eq!(
            LogitVector::new(vec![4.0, 4.0, 1.0], 0).unwrap().margin(),
            0.0
        );
        assert_eq!(
            LogitVector::new(vec![1.0, 5.0, 2.0], 0).unwrap().margin(),
            3.0
        );
    }

    #[test]
    fn image_clamps_and_serializes() {
        let img = ImageTensor::new(1, 2, Colorspace::Grayscale, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        let json = serde_json::to_string(&img).unwrap();
        let back: ImageTensor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, img);
        assert!(ImageTensor::new(0, 2, Colorspace::Rgb, vec![]).is_err());
    }

    #[test]
    fn with_offset_touches_one_coordinate() {
        let s = StyleState::new(vec![vec![1.0, 2.0], vec![3.0]], 0, 1.0).unwrap();
        let p = s.with_offset(ChannelRef::new(0, 1), -10.0).unwrap();
        assert_eq!(p.vectors, vec![vec![1.0, -8.0], vec![3.0]]);
        assert!(s.with_offset(ChannelRef::new(1, 1), 1.0).is_err());
    }

    fn arb_state() -> impl Strategy<Value = StyleState> {
        (
            prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..8), 1..6),
            any::<u64>(),
            0.001f64..=1.0,
        )
            .prop_map(|(vectors, seed, truncation)| StyleState {
                vectors,
                seed,
                truncation,
            })
    }

    proptest! {
        #[test]
        fn style_serialization_is_identity(state in arb_state()) {
            let bytes = serialize_style_state(&state).unwrap();
            prop_assert_eq!(deserialize_style_state(&bytes).unwrap(), state);
        }

        #[test]
        fn argmax_invariant_under_monotone_maps(
            values in prop::collection::vec(-50.0f64..50.0, 2..8),
            scale in 0.01f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let base = LogitVector::new(values.clone(), 0).unwrap();
            let mapped: Vec<f64> = values.iter().map(|v| scale * v + 0.01 * v.powi(3) + shift).collect();
            let mapped = LogitVector::new(mapped, 0).unwrap();
            prop_assert_eq!(predicted_label(&base), predicted_label(&mapped));
        }
    }
}
