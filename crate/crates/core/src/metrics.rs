//! Evaluation metrics: relevance ratio, MS-SSIM, normalized image distance and
//! decision-boundary proximity.

use serde::{Deserialize, Serialize};

use crate::domain::{ImageTensor, LogitVector};
use crate::error::{Error, Result};

/// Exponents of the five-scale MS-SSIM, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `n_rel / (n_rel + n_spu)`; `None` when both are zero.
pub fn r_relevance(n_relevant: usize, n_spurious: usize) -> Option<f64> {
    let total = n_relevant + n_spurious;
    (total > 0).then(|| n_relevant as f64 / total as f64)
}

/// `‖a − b‖₂ / ‖𝟙‖₂`, i.e. the root-mean-square difference.
pub fn d2_image(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "d2_image on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Single logit: `|y|`. Several logits: top-1 minus top-2.
pub fn d2_boundary(logits: &LogitVector) -> f64 {
    logits.margin().abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsim {
    pub value: f64,
    pub scales_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Smallest side length that supports `scales` levels of the 11-tap window.
pub fn min_side_for_scales(scales: usize) -> usize {
    SSIM_WINDOW << scales.saturating_sub(1)
}

/// Multi-scale SSIM on luma with an 11-tap Gaussian window (σ = 1.5), valid
/// filtering and 2×2 average-pool downsampling. When the images are too small
/// for `scales` levels the count is reduced, the leading weights are
/// renormalized to sum to one, and a warning is returned.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor, scales: usize) -> Result<MsSsim> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "ms_ssim on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Validation(format!(
            "scales must be in 1..={}",
            MS_SSIM_WEIGHTS.len()
        )));
    }
    let side = a.height().min(a.width());
    if side < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "images of side {side} are smaller than the {SSIM_WINDOW}-pixel window"
        )));
    }
    let mut used = scales;
    while min_side_for_scales(used) > side {
        used -= 1;
    }
    let warning = (used < scales).then(|| {
        format!("image side {side} supports only {used} of {scales} MS-SSIM scales")
    });
    if let Some(w) = &warning {
        log::debug!("{w}");
    }
    let total: f64 = MS_SSIM_WEIGHTS[..used].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..used].iter().map(|w| w / total).collect();

    let window = gaussian_window();
    let mut x = Plane::luma(a);
    let mut y = Plane::luma(b);
    let mut value = 1.0;
    for (level, w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_components(&x, &y, &window);
        let term = if level + 1 == used { ssim } else { cs };
        value *= term.max(0.0).powf(*w);
        if level + 1 < used {
            x = x.downsample();
            y = y.downsample();
        }
    }
    Ok(MsSsim {
        value,
        scales_used: used,
        warning,
    })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma(img: &ImageTensor) -> Self {
        let l = img.to_luma();
        Self {
            h: l.height(),
            w: l.width(),
            v: l.data().to_vec(),
        }
    }

    fn map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Separable valid-mode filtering.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let ow = self.w - n + 1;
        let oh = self.h - n + 1;
        let mut rows = vec![0.0; self.h * ow];
        for i in 0..self.h {
            for j in 0..ow {
                rows[i * ow + j] = (0..n).map(|t| k[t] * self.v[i * self.w + j + t]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let at = |di: usize, dj: usize| self.v[(2 * i + di) * self.w + 2 * j + dj];
                v.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, v }
    }
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_components(x: &Plane, y: &Plane, k: &[f64]) -> (f64, f64) {
    let mx = x.filter(k);
    let my = y.filter(k);
    let sxx = x.map(x, |a, b| a * b).filter(k);
    let syy = y.map(y, |a, b| a * b).filter(k);
    let sxy = x.map(y, |a, b| a * b).filter(k);
    let n = mx.v.len() as f64;
    let mut ssim = 0.0;
    let mut cs = 0.0;
    for i in 0..mx.v.len() {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cxy = sxy.v[i] - ux * uy;
        let c = (2.0 * cxy + C2) / (vx + vy + C2);
        let l = (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub relevant_channels: usize,
    pub spurious_channels: usize,
    pub influential_inputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_relevance: Option<f64>,
    pub ms_ssim: f64,
    pub d2_image: f64,
    pub d2_boundary: f64,
    pub counts: MetricCounts,
}

/// Mean and sample standard deviation of a series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, std, n })
}
