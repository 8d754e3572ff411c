//! Stochastic two-view augmentation for contrastive pretraining.
//!
//! Each view is produced by random resized crop, colour jitter, Gaussian blur
//! and horizontal flip, in that order. Every function takes the random stream
//! explicitly; given the same stream state the output is bit-identical.
//!
//! Inputs are single-channel, so saturation and hue jitter are identity maps
//! and random grayscale conversion is omitted. Their strengths are still
//! carried in [`AugmentConfig`] and their factors are still drawn, which keeps
//! the draw sequence independent of the channel count.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::interp;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area.
    pub crop_scale: (f64, f64),
    /// Crop width/height ratio, sampled log-uniformly.
    pub crop_aspect: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub flip_prob: f64,
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.08, 1.0),
            crop_aspect: (0.75, 1.33),
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            jitter_prob: 0.8,
            blur_kernel: 23,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
            out_size: 224,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::BadConfig(format!("{name} must satisfy 0 < low <= high, got ({lo}, {hi})")))
            }
        };
        range("crop_scale", self.crop_scale)?;
        range("crop_aspect", self.crop_aspect)?;
        range("blur_sigma", self.blur_sigma)?;
        if self.crop_scale.1 > 1.0 {
            return Err(Error::BadConfig("crop_scale high must be <= 1".into()));
        }
        for (name, p) in [("jitter_prob", self.jitter_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::BadConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::BadConfig(format!("{name} must be non-negative, got {s}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::BadConfig(format!("hue must lie in [0, 0.5], got {}", self.hue)));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::BadConfig(format!("blur_kernel must be odd, got {}", self.blur_kernel)));
        }
        if self.out_size == 0 {
            return Err(Error::BadConfig("out_size must be positive".into()));
        }
        Ok(())
    }
}

/// Two augmented views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub source_index: usize,
}

fn planes(img: &Tensor) -> (usize, usize, usize) {
    match *img.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        ref s => panic!("augmentations expect C×H×W images, got {s:?}"),
    }
}

/// Crop window in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop window.
///
/// Up to ten candidates are drawn; a candidate is accepted only if its
/// integer size fits the image and its realized area fraction and aspect both
/// stay inside the configured ranges. Otherwise the largest centred crop with
/// a clamped aspect is used.
pub fn sample_crop(height: usize, width: usize, config: &AugmentConfig, rng: &mut Rng) -> CropWindow {
    let area = (height * width) as f64;
    let (s_lo, s_hi) = config.crop_scale;
    let (a_lo, a_hi) = config.crop_aspect;
    let (log_lo, log_hi) = (a_lo.ln(), a_hi.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, s_lo, s_hi);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let frac = (w * h) as f64 / area;
        let realized = w as f64 / h as f64;
        if frac < s_lo || frac > s_hi || realized < a_lo || realized > a_hi {
            continue;
        }
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        return CropWindow {
            top,
            left,
            height: h,
            width: w,
        };
    }
    let ratio = width as f64 / height as f64;
    let (w, h) = if ratio < a_lo {
        (width, ((width as f64 / a_lo).floor() as usize).max(1))
    } else if ratio > a_hi {
        (((height as f64 * a_hi).floor() as usize).max(1), height)
    } else {
        (width, height)
    };
    CropWindow {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Cuts `window` out of `img` and resizes it bilinearly to `out_size`².
pub fn apply_crop(img: &Tensor, window: CropWindow, out_size: usize) -> Tensor {
    let (c, _, w) = planes(img);
    let plane = img.numel() / c;
    let mut data = Vec::with_capacity(c * out_size * out_size);
    let mut crop = Vec::with_capacity(window.height * window.width);
    for ch in 0..c {
        let src = &img.data()[ch * plane..(ch + 1) * plane];
        crop.clear();
        for y in window.top..window.top + window.height {
            crop.extend_from_slice(&src[y * w + window.left..y * w + window.left + window.width]);
        }
        data.extend(interp::resize_bilinear(
            &crop,
            window.height,
            window.width,
            out_size,
            out_size,
        ));
    }
    Tensor::from_vec(&[c, out_size, out_size], data).expect("crop output shape")
}

pub fn random_resized_crop(img: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let (_, h, w) = planes(img);
    let window = sample_crop(h, w, config, rng);
    apply_crop(img, window, config.out_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Concrete jitter draw: application order and factors.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterParams {
    pub order: [JitterOp; 4],
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub fn identity() -> Self {
        JitterParams {
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue],
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }
}

/// Draws whether jitter applies and, if so, its parameters.
pub fn sample_jitter(config: &AugmentConfig, rng: &mut Rng) -> Option<JitterParams> {
    if rng.random::<f64>() >= config.jitter_prob {
        return None;
    }
    let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
    order.shuffle(rng);
    let factor = |rng: &mut Rng, s: f64| uniform(rng, (1.0 - s).max(0.0), 1.0 + s);
    let brightness = factor(rng, config.brightness);
    let contrast = factor(rng, config.contrast);
    let saturation = factor(rng, config.saturation);
    let hue = uniform(rng, -config.hue, config.hue);
    Some(JitterParams {
        order,
        brightness,
        contrast,
        saturation,
        hue,
    })
}

/// Applies brightness and contrast in the drawn order, clamping to [0, 1] after each.
pub fn apply_jitter(img: &Tensor, params: &JitterParams) -> Tensor {
    let mut out = img.clone();
    for op in params.order {
        match op {
            JitterOp::Brightness => {
                let b = params.brightness;
                out.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
            }
            JitterOp::Contrast => {
                let c = params.contrast;
                let mean = out.sum() / out.numel() as f64;
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (c * *v + (1.0 - c) * mean).clamp(0.0, 1.0));
            }
            // single channel: no chroma to change
            JitterOp::Saturation | JitterOp::Hue => {}
        }
    }
    out
}

pub fn color_jitter(img: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> Tensor {
    match sample_jitter(config, rng) {
        Some(p) => apply_jitter(img, &p),
        None => img.clone(),
    }
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Mirror index without repeating the edge sample (…, 2, 1, 0, 1, 2, …).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian blur with reflect padding.
pub fn blur_with_sigma(img: &Tensor, kernel_size: usize, sigma: f64) -> Tensor {
    let (c, h, w) = planes(img);
    let k = gaussian_kernel(kernel_size, sigma);
    let half = (kernel_size / 2) as isize;
    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * row[reflect(x as isize + t as isize - half, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[reflect(y as isize + t as isize - half, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let sigma = uniform(rng, config.blur_sigma.0, config.blur_sigma.1);
    // rounding can push a convex combination of [0, 1] samples a hair past 1
    blur_with_sigma(img, config.blur_kernel, sigma).map(|v| v.clamp(0.0, 1.0))
}

/// Reverses the width axis.
pub fn flip(img: &Tensor) -> Tensor {
    let (c, h, w) = planes(img);
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w).take(c * h) {
        row.reverse();
    }
    out
}

pub fn horizontal_flip(img: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> Tensor {
    if rng.random::<f64>() < config.flip_prob {
        flip(img)
    } else {
        img.clone()
    }
}

/// One augmented view: crop → jitter → blur → flip.
pub fn augment_view(img: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> Tensor {
    let v = random_resized_crop(img, config, rng);
    let v = color_jitter(&v, config, rng);
    let v = gaussian_blur(&v, config, rng);
    horizontal_flip(&v, config, rng)
}

pub fn make_view_pair(img: &Tensor, config: &AugmentConfig, rng: &mut Rng, source_index: usize) -> ViewPair {
    let view_a = augment_view(img, config, rng);
    let view_b = augment_view(img, config, rng);
    ViewPair {
        view_a,
        view_b,
        source_index,
    }
}
