//! Systems under test: forward pass to logits, optional input gradients, and
//! head-only fine-tuning for the built-in toy models.

mod detection;
mod toy;

pub use detection::{detection_target_score, BlobDetector, Detection, DetectionShim, Detector};
pub use toy::{fit_logistic, FitConfig, RegionPoolBackbone, ToyClassifier};

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{predicted_label, ImageTensor, LogitVector, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SutCapabilities {
    pub differentiable: bool,
    pub task_kind: TaskKind,
    pub num_classes: usize,
    /// Class under analysis; for detection this is the detector's class id.
    pub target_class: usize,
    /// Whether `forward` may be called from several threads at once.
    pub concurrent: bool,
}

impl SutCapabilities {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be >= 1".into()));
        }
        if self.task_kind == TaskKind::Binary && self.num_classes != 1 {
            return Err(Error::Validation("binary SUTs expose a single logit".into()));
        }
        if self.task_kind != TaskKind::Detection && self.target_class >= self.num_classes {
            return Err(Error::Validation(format!(
                "target class {} out of range for K={}",
                self.target_class, self.num_classes
            )));
        }
        Ok(())
    }

    /// Index of the target logit inside the returned vector.
    pub fn target_index(&self) -> usize {
        match self.task_kind {
            TaskKind::Multiclass => self.target_class,
            TaskKind::Binary | TaskKind::Detection => 0,
        }
    }
}

/// An image with its class. For single-logit SUTs, class 1 is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without monitor improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            max_epochs: 20,
            patience: 3,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// 0 when no epoch beat the starting head.
    pub best_epoch: usize,
    pub initial_monitor_accuracy: f64,
    pub best_monitor_accuracy: f64,
    pub monitor_history: Vec<f64>,
}

pub trait Sut: Send + Sync {
    fn capabilities(&self) -> SutCapabilities;

    fn forward(&self, image: &ImageTensor) -> Result<LogitVector>;

    /// `∂y[target]/∂x`, flattened in image layout.
    fn input_gradient(&self, _image: &ImageTensor, _target: usize) -> Result<Vec<f64>> {
        Err(Error::NotDifferentiable)
    }

    /// Updates only the final classification layer.
    fn finetune_head(
        &mut self,
        _train: &[LabeledImage],
        _monitor: &[LabeledImage],
        _config: &HeadTrainConfig,
    ) -> Result<TrainReport> {
        Err(Error::Unsupported("finetune_head".into()))
    }

    /// Digest of every parameter outside the head, when the SUT exposes them.
    fn frozen_checksum(&self) -> Option<String> {
        None
    }
}

impl<S: Sut + ?Sized> Sut for Box<S> {
    fn capabilities(&self) -> SutCapabilities {
        (**self).capabilities()
    }
    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        (**self).forward(image)
    }
    fn input_gradient(&self, image: &ImageTensor, target: usize) -> Result<Vec<f64>> {
        (**self).input_gradient(image, target)
    }
    fn finetune_head(
        &mut self,
        train: &[LabeledImage],
        monitor: &[LabeledImage],
        config: &HeadTrainConfig,
    ) -> Result<TrainReport> {
        (**self).finetune_head(train, monitor, config)
    }
    fn frozen_checksum(&self) -> Option<String> {
        (**self).frozen_checksum()
    }
}

/// Borrowed SUTs are forward-only; fine-tuning needs ownership.
impl<S: Sut + ?Sized> Sut for &S {
    fn capabilities(&self) -> SutCapabilities {
        (**self).capabilities()
    }
    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        (**self).forward(image)
    }
    fn input_gradient(&self, image: &ImageTensor, target: usize) -> Result<Vec<f64>> {
        (**self).input_gradient(image, target)
    }
    fn frozen_checksum(&self) -> Option<String> {
        (**self).frozen_checksum()
    }
}

/// Fraction of images whose predicted label equals the stored label.
pub fn accuracy(sut: &dyn Sut, set: &[LabeledImage]) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for item in set {
        if predicted_label(&sut.forward(&item.image)?) == item.label {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / set.len() as f64))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_image(image: &ImageTensor, shape: [usize; 3]) -> Result<()> {
    if image.shape() != shape {
        return Err(Error::Shape(format!(
            "SUT expects {:?} images, got {:?}",
            shape,
            image.shape()
        )));
    }
    Ok(())
}

/// `y = w · mean(x) + b`, single logit.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanLinearSut {
    pub w: f64,
    pub b: f64,
}

impl Sut for MeanLinearSut {
    fn capabilities(&self) -> SutCapabilities {
        SutCapabilities {
            differentiable: true,
            task_kind: TaskKind::Binary,
            num_classes: 1,
            target_class: 0,
            concurrent: true,
        }
    }

    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        let mean = image.data().iter().sum::<f64>() / image.len() as f64;
        LogitVector::binary(self.w * mean + self.b)
    }

    fn input_gradient(&self, image: &ImageTensor, target: usize) -> Result<Vec<f64>> {
        if target != 0 {
            return Err(Error::Validation(format!("target {target} out of range for K=1")));
        }
        Ok(vec![self.w / image.len() as f64; image.len()])
    }
}

/// Ignores its input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantSut {
    pub values: Vec<f64>,
    pub target_class: usize,
}

impl ConstantSut {
    pub fn binary(value: f64) -> Self {
        Self {
            values: vec![value],
            target_class: 0,
        }
    }
}

impl Sut for ConstantSut {
    fn capabilities(&self) -> SutCapabilities {
        SutCapabilities {
            differentiable: true,
            task_kind: if self.values.len() == 1 {
                TaskKind::Binary
            } else {
                TaskKind::Multiclass
            },
            num_classes: self.values.len(),
            target_class: self.target_class,
            concurrent: true,
        }
    }

    fn forward(&self, _image: &ImageTensor) -> Result<LogitVector> {
        LogitVector::new(self.values.clone(), self.target_class)
    }

    fn input_gradient(&self, image: &ImageTensor, _target: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; image.len()])
    }
}

/// Counts forward and gradient invocations of the wrapped SUT.
pub struct CountingSut<S> {
    inner: S,
    forwards: AtomicUsize,
    gradients: AtomicUsize,
}

impl<S: Sut> CountingSut<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            forwards: AtomicUsize::new(0),
            gradients: AtomicUsize::new(0),
        }
    }

    pub fn forward_calls(&self) -> usize {
        self.forwards.load(Ordering::SeqCst)
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradients.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::SeqCst);
        self.gradients.store(0, Ordering::SeqCst);
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Sut> Sut for CountingSut<S> {
    fn capabilities(&self) -> SutCapabilities {
        self.inner.capabilities()
    }

    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        self.forwards.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(image)
    }

    fn input_gradient(&self, image: &ImageTensor, target: usize) -> Result<Vec<f64>> {
        self.gradients.fetch_add(1, Ordering::SeqCst);
        self.inner.input_gradient(image, target)
    }

    fn finetune_head(
        &mut self,
        train: &[LabeledImage],
        monitor: &[LabeledImage],
        config: &HeadTrainConfig,
    ) -> Result<TrainReport> {
        self.inner.finetune_head(train, monitor, config)
    }

    fn frozen_checksum(&self) -> Option<String> {
        self.inner.frozen_checksum()
    }
}
