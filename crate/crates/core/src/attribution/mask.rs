use crate::domain::{Colorspace, ImageTensor};
use crate::error::{Error, Result};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.2;

/// Per-pixel max-over-channels absolute difference, divided by its maximum;
/// values below `threshold` are zeroed. Single-channel output.
pub fn build_diff_mask(original: &ImageTensor, perturbed: &ImageTensor, threshold: f64) -> Result<ImageTensor> {
    if !original.same_shape(perturbed) {
        return Err(Error::Shape(format!(
            "diff mask of {:?} vs {:?}",
            original.shape(),
            perturbed.shape()
        )));
    }
    let c = original.channels();
    let diff: Vec<f64> = original
        .data()
        .chunks_exact(c)
        .zip(perturbed.data().chunks_exact(c))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect();
    let peak = diff.iter().copied().fold(0.0, f64::max);
    let data = if peak > 0.0 {
        diff.iter()
            .map(|d| {
                let v = d / peak;
                if v < threshold {
                    0.0
                } else {
                    v
                }
            })
            .collect()
    } else {
        diff
    };
    ImageTensor::new(original.height(), original.width(), Colorspace::Grayscale, data)
}

/// Original, perturbed and mask side by side.
pub fn compose_triptych(original: &ImageTensor, perturbed: &ImageTensor, mask: &ImageTensor) -> Result<ImageTensor> {
    if !original.same_shape(perturbed) || mask.height() != original.height() || mask.width() != original.width() {
        return Err(Error::Shape("triptych parts must share height and width".into()));
    }
    ImageTensor::hstack(&[original, perturbed, mask])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(f: impl Fn(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::from_fn(8, 8, Colorspace::Rgb, f).unwrap()
    }

    #[test]
    fn identical_images_give_empty_mask() {
        let a = rgb(|i, j, k| (i + j + k) as f64 / 30.0);
        let m = build_diff_mask(&a, &a, 0.2).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.colorspace(), Colorspace::Grayscale);
    }

    #[test]
    fn support_is_the_changed_quadrant() {
        let a = rgb(|_, _, _| 0.5);
        let b = rgb(|i, j, k| if i < 4 && j >= 4 && k == 1 { 0.9 } else { 0.5 });
        let m = build_diff_mask(&a, &b, 0.2).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let inside = i < 4 && j >= 4;
                assert_eq!(m.get(i, j, 0) > 0.0, inside);
            }
        }
    }

    #[test]
    fn small_differences_fall_below_threshold() {
        let a = rgb(|_, _, _| 0.5);
        let b = rgb(|i, j, _| if i == 0 && j == 0 { 1.0 } else { 0.55 });
        let m = build_diff_mask(&a, &b, 0.2).unwrap();
        assert_eq!(m.get(0, 0, 0), 1.0);
        assert_eq!(m.get(3, 3, 0), 0.0);
    }

    #[test]
    fn triptych_is_three_wide() {
        let a = rgb(|_, _, _| 0.5);
        let m = build_diff_mask(&a, &a, 0.2).unwrap();
        let t = compose_triptych(&a, &a, &m).unwrap();
        assert_eq!(t.shape(), [8, 24, 3]);
    }
}
