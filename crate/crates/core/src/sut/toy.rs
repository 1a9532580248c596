//! Toy classifier: fixed region-pooling backbone plus a trainable linear head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, sha256_hex, HeadTrainConfig, LabeledImage, Sut, SutCapabilities, TrainReport};
use crate::domain::{predicted_label, ImageTensor, LogitVector, TaskKind};
use crate::error::{Error, Result};

/// Splits the image into a `grid × grid` lattice and emits
/// `tanh(gain · (cell_mean − center))` per cell and color channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPoolBackbone {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid: usize,
    pub gain: f64,
    pub center: f64,
}

impl RegionPoolBackbone {
    pub fn new(height: usize, width: usize, channels: usize, grid: usize) -> Result<Self> {
        if grid == 0 || grid > height || grid > width {
            return Err(Error::Validation(format!(
                "grid {grid} does not fit a {height}x{width} image"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            grid,
            gain: 4.0,
            center: 0.5,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    fn bounds(&self, cell: usize, extent: usize) -> (usize, usize) {
        (cell * extent / self.grid, (cell + 1) * extent / self.grid)
    }

    fn pooled(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        check_image(image, [self.height, self.width, self.channels])?;
        let mut out = Vec::with_capacity(self.feature_count());
        for gi in 0..self.grid {
            let (r0, r1) = self.bounds(gi, self.height);
            for gj in 0..self.grid {
                let (c0, c1) = self.bounds(gj, self.width);
                let count = ((r1 - r0) * (c1 - c0)) as f64;
                for k in 0..self.channels {
                    let mut sum = 0.0;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            sum += image.get(i, j, k);
                        }
                    }
                    out.push(sum / count);
                }
            }
        }
        Ok(out)
    }

    pub fn features(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self
            .pooled(image)?
            .into_iter()
            .map(|p| (self.gain * (p - self.center)).tanh())
            .collect())
    }

    /// Pulls a feature-space cotangent back to the image.
    fn backward(&self, image: &ImageTensor, feature_cot: &[f64]) -> Result<Vec<f64>> {
        let feats = self.features(image)?;
        let mut grad = vec![0.0; image.len()];
        let mut f = 0;
        for gi in 0..self.grid {
            let (r0, r1) = self.bounds(gi, self.height);
            for gj in 0..self.grid {
                let (c0, c1) = self.bounds(gj, self.width);
                let count = ((r1 - r0) * (c1 - c0)) as f64;
                for k in 0..self.channels {
                    let g = feature_cot[f] * self.gain * (1.0 - feats[f] * feats[f]) / count;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            grad[(i * self.width + j) * self.channels + k] += g;
                        }
                    }
                    f += 1;
                }
            }
        }
        Ok(grad)
    }

    fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for v in [self.height, self.width, self.channels, self.grid] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.gain.to_le_bytes());
        bytes.extend_from_slice(&self.center.to_le_bytes());
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClassifier {
    pub backbone: RegionPoolBackbone,
    /// `K × F`, row per class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub target_class: usize,
}

impl ToyClassifier {
    pub fn new(
        backbone: RegionPoolBackbone,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        target_class: usize,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != bias.len() {
            return Err(Error::Validation("head needs one bias per weight row".into()));
        }
        if weights.iter().any(|r| r.len() != backbone.feature_count()) {
            return Err(Error::Shape(format!(
                "head rows must have {} weights",
                backbone.feature_count()
            )));
        }
        if target_class >= weights.len() {
            return Err(Error::Validation("target class out of range".into()));
        }
        Ok(Self {
            backbone,
            weights,
            bias,
            target_class,
        })
    }

    fn logits_from_features(&self, feats: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(feats).map(|(w, f)| w * f).sum::<f64>())
            .collect()
    }

    fn positive(&self, label: usize) -> f64 {
        let hit = if self.weights.len() == 1 {
            label == 1
        } else {
            label == self.target_class
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    pub fn head_parameters(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.weights.concat();
        out.extend_from_slice(&self.bias);
        out
    }
}

impl Sut for ToyClassifier {
    fn capabilities(&self) -> SutCapabilities {
        let k = self.weights.len();
        SutCapabilities {
            differentiable: true,
            task_kind: if k == 1 {
                TaskKind::Binary
            } else {
                TaskKind::Multiclass
            },
            num_classes: k,
            target_class: self.target_class,
            concurrent: true,
        }
    }

    fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        let feats = self.backbone.features(image)?;
        LogitVector::new(self.logits_from_features(&feats), self.target_class)
    }

    fn input_gradient(&self, image: &ImageTensor, target: usize) -> Result<Vec<f64>> {
        let row = self
            .weights
            .get(target)
            .ok_or_else(|| Error::Validation(format!("target {target} out of range")))?;
        self.backbone.backward(image, row)
    }

    /// Adam on the binary cross-entropy of the target logit. The monitor set
    /// (or the training set when it is empty) drives early stopping and the
    /// best head is restored at the end.
    fn finetune_head(
        &mut self,
        train: &[LabeledImage],
        monitor: &[LabeledImage],
        config: &HeadTrainConfig,
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Validation("fine-tuning set is empty".into()));
        }
        if !(config.lr >= 0.0 && config.lr.is_finite()) || config.batch_size == 0 {
            return Err(Error::Validation(
                "lr must be finite and >= 0, batch_size >= 1".into(),
            ));
        }
        let feats: Vec<Vec<f64>> = train
            .iter()
            .map(|it| self.backbone.features(&it.image))
            .collect::<Result<_>>()?;
        let targets: Vec<f64> = train.iter().map(|it| self.positive(it.label)).collect();
        let monitor = if monitor.is_empty() { train } else { monitor };
        let monitor_feats: Vec<(Vec<f64>, usize)> = monitor
            .iter()
            .map(|it| Ok((self.backbone.features(&it.image)?, it.label)))
            .collect::<Result<_>>()?;
        let monitor_acc = |head: &ToyClassifier| -> Result<f64> {
            let mut correct = 0usize;
            for (f, label) in &monitor_feats {
                let l = LogitVector::new(head.logits_from_features(f), head.target_class)?;
                correct += usize::from(predicted_label(&l) == *label);
            }
            Ok(correct as f64 / monitor_feats.len() as f64)
        };

        let t = self.target_class;
        let nf = self.backbone.feature_count();
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; nf + 1];
        let mut v = vec![0.0; nf + 1];
        let mut step = 0i32;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();

        let initial = monitor_acc(self)?;
        let mut best = (initial, 0usize, self.weights[t].clone(), self.bias[t]);
        let mut history = Vec::new();
        let mut stale = 0usize;
        let mut epochs_run = 0usize;

        for epoch in 1..=config.max_epochs {
            epochs_run = epoch;
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let mut grad = vec![0.0; nf + 1];
                for &i in batch {
                    let f = &feats[i];
                    let y = self.bias[t] + self.weights[t].iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
                    let p = 1.0 / (1.0 + (-y).exp());
                    let r = (p - targets[i]) / batch.len() as f64;
                    for (g, x) in grad.iter_mut().zip(f) {
                        *g += r * x;
                    }
                    grad[nf] += r;
                }
                step += 1;
                let bc1 = 1.0 - beta1.powi(step);
                let bc2 = 1.0 - beta2.powi(step);
                for j in 0..=nf {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
                    let update = config.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    if j < nf {
                        self.weights[t][j] -= update;
                    } else {
                        self.bias[t] -= update;
                    }
                }
            }
            let acc = monitor_acc(self)?;
            history.push(acc);
            if acc > best.0 {
                best = (acc, epoch, self.weights[t].clone(), self.bias[t]);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
        self.weights[t] = best.2;
        self.bias[t] = best.3;
        Ok(TrainReport {
            epochs_run,
            best_epoch: best.1,
            initial_monitor_accuracy: initial,
            best_monitor_accuracy: best.0,
            monitor_history: history,
        })
    }

    fn frozen_checksum(&self) -> Option<String> {
        Some(self.backbone.checksum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub l1: f64,
    pub l2: f64,
    pub iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            l1: 0.0,
            l2: 1e-3,
            iterations: 3000,
        }
    }
}

/// Full-batch proximal gradient descent on logistic loss with elastic-net
/// penalty `l1·|w|₁ + l2/2·|w|²`; the bias is not penalized.
/// Returns `(weights, bias)`.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool], config: &FitConfig) -> Result<(Vec<f64>, f64)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Validation(
            "logistic fit needs one label per non-empty feature row".into(),
        ));
    }
    let nf = features[0].len();
    let n = features.len() as f64;
    let mut w = vec![0.0; nf];
    let mut b = 0.0;
    for _ in 0..config.iterations {
        let mut gw: Vec<f64> = w.iter().map(|wi| config.l2 * wi).collect();
        let mut gb = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let z = b + w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let r = (p - f64::from(u8::from(y))) / n;
            for (g, x) in gw.iter_mut().zip(f) {
                *g += r * x;
            }
            gb += r;
        }
        let shrink = config.lr * config.l1;
        for (wi, g) in w.iter_mut().zip(&gw) {
            let v = *wi - config.lr * g;
            *wi = v.signum() * (v.abs() - shrink).max(0.0);
        }
        b -= config.lr * gb;
    }
    Ok((w, b))
}
