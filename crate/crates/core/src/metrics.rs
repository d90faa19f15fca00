//! PSNR, SSIM and MSE image-quality measures.
//!
//! All accumulation is in `f64`. SSIM follows Wang et al.: an 11x11 Gaussian
//! window with sigma 1.5, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, averaged over
//! every window position that lies fully inside the image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Cap applied to PSNR before scoring (identical images give +inf).
pub const DEFAULT_PSNR_CAP: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("inputs differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("dynamic range must be positive, got {0}")]
    BadRange(f64),
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    TooSmall { height: usize, width: usize, window: usize },
    #[error("input is not a single-channel image: {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("empty input")]
    Empty,
}

/// `[p, s, m]`: PSNR (dB), SSIM, MSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricVector {
    /// Builds a vector whose PSNR is derived from `mse`.
    pub fn from_mse(mse: f64, ssim: f64, range: f64) -> Self {
        Self {
            psnr: psnr_from_mse(mse, range),
            ssim,
            mse,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.psnr.is_finite() && self.ssim.is_finite() && self.mse.is_finite()
    }

    /// Element-wise mean of several vectors; PSNR is averaged in dB after
    /// clamping to `cap`.
    pub fn mean(items: &[MetricVector], cap: f64) -> Option<MetricVector> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(MetricVector {
            psnr: items.iter().map(|m| m.psnr.min(cap)).sum::<f64>() / n,
            ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
            mse: items.iter().map(|m| m.mse).sum::<f64>() / n,
        })
    }
}

/// Running mean of squared differences. The running form returns the exact
/// value for constant differences, which a sum-then-divide would not.
pub fn mse_of<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::ShapeMismatch(vec![a.len()], vec![b.len()]));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut mean = 0.0f64;
    for (k, (&x, &y)) in a.iter().zip(b).enumerate() {
        let d = x.into() - y.into();
        mean += (d * d - mean) / (k + 1) as f64;
    }
    Ok(mean)
}

/// `10 log10(L^2 / mse)`, or `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    20.0 * (range / mse.sqrt()).log10()
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    mse_of(a.data(), b.data())
}

pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64, MetricError> {
    check_range(range)?;
    Ok(psnr_from_mse(mse(a, b)?, range))
}

pub fn ssim(a: &Tensor, b: &Tensor, range: f64) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let (h, w) = a
        .image_dims()
        .ok_or_else(|| MetricError::NotAnImage(a.shape().to_vec()))?;
    ssim_of(a.data(), b.data(), h, w, range)
}

/// All three measures of `estimate` against `reference`.
pub fn evaluate(estimate: &Tensor, reference: &Tensor, range: f64) -> Result<MetricVector, MetricError> {
    let m = mse(estimate, reference)?;
    let s = ssim(estimate, reference, range)?;
    check_range(range)?;
    Ok(MetricVector::from_mse(m, s, range))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

fn check_range(range: f64) -> Result<(), MetricError> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(MetricError::BadRange(range));
    }
    Ok(())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Valid-mode separable Gaussian filter; output is `(h-10) x (w-10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let line = &src[y * w + x..y * w + x + SSIM_WINDOW];
            rows[y * ow + x] = line.iter().zip(win).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| rows[(y + k) * ow + x] * win[k]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h x w` row-major images.
pub fn ssim_of<T: Copy + Into<f64>>(a: &[T], b: &[T], h: usize, w: usize, range: f64) -> Result<f64, MetricError> {
    check_range(range)?;
    if a.len() != b.len() || a.len() != h * w {
        return Err(MetricError::ShapeMismatch(vec![a.len()], vec![b.len()]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let a: Vec<f64> = a.iter().map(|&v| v.into()).collect();
    let b: Vec<f64> = b.iter().map(|&v| v.into()).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();

    let mu_a = filter_valid(&a, h, w, &win);
    let mu_b = filter_valid(&b, h, w, &win);
    let e_aa = filter_valid(&aa, h, w, &win);
    let e_bb = filter_valid(&bb, h, w, &win);
    let e_ab = filter_valid(&ab, h, w, &win);

    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        Tensor::image(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn mse_identities() {
        let a = img(12, 12, |y, x| ((y * 7 + x * 3) % 10) as f32 / 10.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_of(&[0.0f64; 50], &[0.1f64; 50]).unwrap(), 0.1f64 * 0.1);
        let b = img(12, 12, |_, _| 0.0);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert!(mse(&a, &img(12, 11, |_, _| 0.0)).is_err());
    }

    #[test]
    fn psnr_values() {
        let zeros = vec![0.0f64; 64];
        let tenth = vec![0.1f64; 64];
        assert_eq!(psnr_from_mse(mse_of(&zeros, &tenth).unwrap(), 1.0), 20.0);
        let twentieth = vec![0.05f64; 64];
        let p = psnr_from_mse(mse_of(&zeros, &twentieth).unwrap(), 1.0);
        assert!((p - 26.0206).abs() < 1e-4);
        assert!((p - 20.0 - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0, 1.0), f64::INFINITY);
        let a = img(4, 4, |_, _| 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&a, &a, 0.0), Err(MetricError::BadRange(0.0)));
    }

    #[test]
    fn psnr_of_f32_images_is_close_to_analytic() {
        let a = img(16, 16, |_, _| 0.5);
        let b = img(16, 16, |_, _| 0.4);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = img(20, 17, |y, x| ((y * 31 + x * 17) % 23) as f32 / 23.0);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_flat_offset_matches_closed_form() {
        let (mu, c) = (0.25f64, 0.125f64);
        let a = img(16, 16, |_, _| mu as f32);
        let b = img(16, 16, |_, _| (mu + c) as f32);
        let c1 = 0.01f64.powi(2);
        let expect = (2.0 * mu * (mu + c) + c1) / (mu * mu + (mu + c) * (mu + c) + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_low() {
        let a = img(24, 24, |y, x| ((y / 3 + x / 3) % 2) as f32);
        let b = img(24, 24, |y, x| 1.0 - ((y / 3 + x / 3) % 2) as f32);
        let s = ssim(&a, &b, 1.0).unwrap();
        assert!(s < 0.5, "{s}");
        assert_eq!(s, ssim(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(10, 30, |_, _| 0.0);
        assert!(matches!(ssim(&a, &a, 1.0), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn metric_vector_psnr_is_consistent_with_mse() {
        for m in [1e-6, 3.3e-4, 0.01, 0.2] {
            let v = MetricVector::from_mse(m, 0.9, 1.0);
            assert!((v.psnr - (20.0 * 1f64.log10() - 10.0 * m.log10())).abs() < 1e-9);
        }
    }
}
