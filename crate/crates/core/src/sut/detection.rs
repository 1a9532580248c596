//! Detection-score shim: turns post-NMS detections into a single logit.

use serde::{Deserialize, Serialize};

use super::{check_image, Sut, SutCapabilities};
use crate::domain::{ImageTensor, LogitVector, TaskKind};
use crate::error::{Error, Result};

pub const DEFAULT_DETECTION_FLOOR: f64 = -10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    /// `[x0, y0, x1, y1]` in relative coordinates.
    pub bbox: [f64; 4],
}

pub trait Detector: Send + Sync {
    /// Post-NMS detections for one image.
    fn detect(&self, image: &ImageTensor) -> Result<Vec<Detection>>;
}

/// `logit(max confidence)` over detections of `target_class`; `floor` when there are none.
pub fn detection_target_score(detections: &[Detection], target_class: usize, floor: f64) -> Result<f64> {
    let mut best: Option<f64> = None;
    for d in detections {
        if !(d.confidence > 0.0 && d.confidence < 1.0) {
            return Err(Error::Validation(format!(
                "detection confidence {} outside (0, 1)",
                d.confidence
            )));
        }
        if d.class_id == target_class {
            best = Some(best.map_or(d.confidence, |b: f64| b.max(d.confidence)));
        }
    }
    Ok(best.map_or(floor, |p| (p / (1.0 - p)).ln()))
}

pub struct DetectionShim<D> {
    pub detector: D,
    pub target_class: usize,
    pub floor: f64,
}

impl<D: Detector> DetectionShim<D> {
    pub fn new(detector: D, target_class: usize) -> Self {
        Self {
            detector,
            target_class,
            floor: DEFAULT_DETECTION_FLOOR,
        }
    }
}

impl<D: Detector> Sut for DetectionShim<D> {
    fn capabilities(&self) -> SutCapabilities {
        SutCapabilities {
            differentiable: false,
            task_kind: TaskKind::Detection,
            num_classes: 1,
            target_class: self.target_class,
            concurrent: true,
        }
    }

    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        let dets = self.detector.detect(image)?;
        LogitVector::binary(detection_target_score(&dets, self.target_class, self.floor)?)
    }
}

/// Toy detector for the synthetic renderer. Class 0 is the yellow foreground
/// object, class 1 the blue corner blob. Each class yields at most one box
/// around its colored pixels, scored by how many there are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobDetector {
    pub height: usize,
    pub width: usize,
    /// Detections below this confidence are suppressed.
    pub min_confidence: f64,
}

impl BlobDetector {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            min_confidence: 0.05,
        }
    }
}

impl Detector for BlobDetector {
    fn detect(&self, image: &ImageTensor) -> Result<Vec<Detection>> {
        check_image(image, [self.height, self.width, 3])?;
        let mut out = Vec::new();
        for class_id in 0..2 {
            let mut hits = 0usize;
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for i in 0..self.height {
                for j in 0..self.width {
                    let (r, g, b) = (image.get(i, j, 0), image.get(i, j, 1), image.get(i, j, 2));
                    let score = match class_id {
                        0 => (r + g) / 2.0 - b,
                        _ => b - (r + g) / 2.0,
                    };
                    if score > 0.25 {
                        hits += 1;
                        x0 = x0.min(j);
                        y0 = y0.min(i);
                        x1 = x1.max(j + 1);
                        y1 = y1.max(i + 1);
                    }
                }
            }
            let area = hits as f64 / (self.height * self.width) as f64;
            let confidence = (1.0 / (1.0 + (-(60.0 * (area - 0.03))).exp())).clamp(1e-6, 1.0 - 1e-6);
            if hits > 0 && confidence >= self.min_confidence {
                out.push(Detection {
                    class_id,
                    confidence,
                    bbox: [
                        x0 as f64 / self.width as f64,
                        y0 as f64 / self.height as f64,
                        x1 as f64 / self.width as f64,
                        y1 as f64 / self.height as f64,
                    ],
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Colorspace;

    fn det(class_id: usize, confidence: f64) -> Detection {
        Detection {
            class_id,
            confidence,
            bbox: [0.0, 0.0, 1.0, 1.0],
        }
    }

    #[test]
    fn logit_of_max_confidence() {
        let s = detection_target_score(&[det(2, 0.9), det(2, 0.6)], 2, -10.0).unwrap();
        assert!((s - 2.1972).abs() < 1e-4);
        assert_eq!(detection_target_score(&[det(2, 0.5)], 2, -10.0).unwrap(), 0.0);
        assert_eq!(detection_target_score(&[det(1, 0.9)], 2, -10.0).unwrap(), -10.0);
        assert!(detection_target_score(&[det(2, 1.0)], 2, -10.0).is_err());
    }

    #[test]
    fn shim_floors_empty_images() {
        let shim = DetectionShim::new(BlobDetector::new(8, 8), 0);
        let gray = ImageTensor::filled(8, 8, Colorspace::Rgb, 0.5).unwrap();
        assert_eq!(shim.forward(&gray).unwrap().target_value(), -10.0);
        let yellow = ImageTensor::from_fn(8, 8, Colorspace::Rgb, |_, _, k| if k == 2 { 0.1 } else { 0.9 }).unwrap();
        assert!(shim.forward(&yellow).unwrap().target_value() > 0.0);
    }
}
