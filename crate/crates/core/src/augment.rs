//! Stochastic image augmentation: the strong policy fed to the student and the
//! weak policy fed to both teachers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageBatch, Size};
pub use crate::rng::SeededRng;

/// Rejection attempts before falling back to a center crop.
const CROP_ATTEMPTS: usize = 10;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterStrengths {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterStrengths {
    fn default() -> Self {
        JitterStrengths {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub crop_scale: (f32, f32),
    pub crop_ratio: (f32, f32),
    pub out_size: Size,
    pub p_flip: f32,
    pub p_jitter: f32,
    pub p_gray: f32,
    pub p_blur: f32,
    pub jitter: JitterStrengths,
    pub blur_sigma: (f32, f32),
}

impl AugmentPolicy {
    /// Student-side policy: crop (0.2, 1), flip 0.5, jitter 0.8, gray 0.2, blur 0.5.
    pub fn strong(out_size: Size) -> Self {
        AugmentPolicy {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size,
            p_flip: 0.5,
            p_jitter: 0.8,
            p_gray: 0.2,
            p_blur: 0.5,
            jitter: JitterStrengths::default(),
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Teacher-side policy: crop (0.2, 1) and flip 0.9 only.
    pub fn weak(out_size: Size) -> Self {
        AugmentPolicy {
            p_flip: 0.9,
            p_jitter: 0.0,
            p_gray: 0.0,
            p_blur: 0.0,
            ..Self::strong(out_size)
        }
    }

    /// Full-frame resize with every random transform disabled.
    pub fn identity(out_size: Size) -> Self {
        AugmentPolicy {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            p_flip: 0.0,
            ..Self::weak(out_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::param("crop_scale", format!("need 0 < low <= high <= 1, got {:?}", self.crop_scale)));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::param("crop_ratio", format!("need 0 < low <= high, got {:?}", self.crop_ratio)));
        }
        for (name, p) in [
            ("p_flip", self.p_flip),
            ("p_jitter", self.p_jitter),
            ("p_gray", self.p_gray),
            ("p_blur", self.p_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(name, format!("probability {p} outside [0, 1]")));
            }
        }
        if self.out_size.height == 0 || self.out_size.width == 0 {
            return Err(Error::param("out_size", "must be at least 1x1"));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::param("blur_sigma", format!("need 0 < low <= high, got {:?}", self.blur_sigma)));
        }
        Ok(())
    }
}

/// Samples a crop with area fraction in `scale` and log-uniform aspect ratio
/// in `ratio`, then bilinearly resizes it to `out_size`.
pub fn random_resized_crop<R: Rng>(
    img: &Image,
    scale: (f32, f32),
    ratio: (f32, f32),
    out_size: Size,
    rng: &mut R,
) -> Image {
    let (top, left, h, w) = sample_crop(img.height, img.width, scale, ratio, rng);
    resize_bilinear(img, (top, left, h, w), out_size)
}

fn sample_crop<R: Rng>(
    height: usize,
    width: usize,
    scale: (f32, f32),
    ratio: (f32, f32),
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (f64::from(ratio.0).ln(), f64::from(ratio.1).ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, f64::from(scale.0), f64::from(scale.1));
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && w <= width && h >= 1 && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    // Center crop, clamped to the allowed aspect range.
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < f64::from(ratio.0) {
        let h = (width as f64 / f64::from(ratio.0)).round() as usize;
        (width, h.clamp(1, height))
    } else if in_ratio > f64::from(ratio.1) {
        let w = (height as f64 * f64::from(ratio.1)).round() as usize;
        (w.clamp(1, width), height)
    } else {
        (width, height)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Half-pixel-centred bilinear resampling of a crop window.
fn resize_bilinear(img: &Image, crop: (usize, usize, usize, usize), out: Size) -> Image {
    let (top, left, ch, cw) = crop;
    let sy = ch as f32 / out.height as f32;
    let sx = cw as f32 / out.width as f32;
    let axis = |dst: usize, scale: f32, origin: usize, extent: usize| -> (usize, usize, f32) {
        let src = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f32);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (origin + i0, origin + i1, src - i0 as f32)
    };
    let ys: Vec<_> = (0..out.height).map(|y| axis(y, sy, top, ch)).collect();
    let xs: Vec<_> = (0..out.width).map(|x| axis(x, sx, left, cw)).collect();

    let mut result = Image::zeros(img.channels, out.height, out.width);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = result.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p = |y: usize, x: usize| src[y * img.width + x];
                let top_row = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom_row = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                dst[oy * out.width + ox] = top_row * (1.0 - fy) + bottom_row * fy;
            }
        }
    }
    result
}

fn coin<R: Rng>(rng: &mut R, p: f32) -> bool {
    // One draw per decision, taken even when p is 0 or 1.
    let u: f32 = rng.random();
    u < p
}

pub fn horizontal_flip<R: Rng>(img: &Image, p: f32, rng: &mut R) -> Image {
    if coin(rng, p) {
        mirror(img)
    } else {
        img.clone()
    }
}

fn mirror(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.data.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

fn gray_plane(img: &Image) -> Vec<f32> {
    let hw = img.height * img.width;
    (0..hw)
        .map(|k| (0..3).map(|c| LUMA[c] * img.data[c * hw + k]).sum())
        .collect()
}

fn clamp01(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

#[derive(Clone, Copy)]
enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// Brightness/contrast/saturation/hue perturbation in random order, applied
/// with probability `p`. Saturation and hue only act on 3-channel images.
pub fn color_jitter<R: Rng>(img: &Image, p: f32, strengths: &JitterStrengths, rng: &mut R) -> Image {
    if !coin(rng, p) {
        return img.clone();
    }
    let factor = |rng: &mut R, s: f32| -> f32 { uniform(rng, f64::from((1.0 - s).max(0.0)), f64::from(1.0 + s)) as f32 };
    let b = factor(rng, strengths.brightness);
    let c = factor(rng, strengths.contrast);
    let s = factor(rng, strengths.saturation);
    let h = uniform(rng, -f64::from(strengths.hue), f64::from(strengths.hue)) as f32;
    let mut order = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation, JitterOp::Hue];
    order.shuffle(rng);

    let mut out = img.clone();
    let rgb = img.channels == 3;
    for op in order {
        match op {
            JitterOp::Brightness => out.data.iter_mut().for_each(|v| *v *= b),
            JitterOp::Contrast => {
                let mean = if rgb {
                    let g = gray_plane(&out);
                    g.iter().sum::<f32>() / g.len() as f32
                } else {
                    out.data.iter().sum::<f32>() / out.data.len() as f32
                };
                out.data.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
            }
            JitterOp::Saturation if rgb => {
                let g = gray_plane(&out);
                let hw = g.len();
                for ch in 0..3 {
                    for (k, v) in out.data[ch * hw..(ch + 1) * hw].iter_mut().enumerate() {
                        *v = (*v - g[k]) * s + g[k];
                    }
                }
            }
            JitterOp::Hue if rgb && h != 0.0 => shift_hue(&mut out, h),
            _ => {}
        }
        clamp01(&mut out);
    }
    out
}

fn shift_hue(img: &mut Image, delta: f32) {
    let hw = img.height * img.width;
    for k in 0..hw {
        let (r, g, b) = (img.data[k], img.data[hw + k], img.data[2 * hw + k]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + delta).rem_euclid(1.0), s, v);
        img.data[k] = r;
        img.data[hw + k] = g;
        img.data[2 * hw + k] = b;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Replaces every channel with the luma of the pixel, with probability `p`.
pub fn grayscale<R: Rng>(img: &Image, p: f32, rng: &mut R) -> Image {
    if !coin(rng, p) || img.channels != 3 {
        return img.clone();
    }
    let g = gray_plane(img);
    let mut out = img.clone();
    for c in 0..3 {
        out.plane_mut(c).copy_from_slice(&g);
    }
    out
}

/// Largest odd integer not above `max(3, width / 10)`.
pub fn blur_kernel_size(width: usize) -> usize {
    let k = (width as f32 / 10.0).max(3.0).floor() as usize;
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let r = (size / 2) as f32;
    let mut k: Vec<f32> = (0..size)
        .map(|i| {
            let x = i as f32 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection: -1 → 0, n → n-1. With a symmetric
/// kernel every pixel's total weight stays 1, so the image mean is preserved.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur with σ drawn from `sigma_range`, applied with
/// probability `p`.
pub fn gaussian_blur<R: Rng>(img: &Image, p: f32, sigma_range: (f32, f32), rng: &mut R) -> Image {
    let apply = coin(rng, p);
    let sigma = uniform(rng, f64::from(sigma_range.0), f64::from(sigma_range.1)) as f32;
    if !apply {
        return img.clone();
    }
    blur_with_sigma(img, sigma)
}

pub fn blur_with_sigma(img: &Image, sigma: f32) -> Image {
    let size = blur_kernel_size(img.width);
    let kernel = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let mut tmp = vec![0f32; h * w];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    clamp01(&mut out);
    out
}

/// crop → flip → jitter → gray → blur, driven by one random stream.
pub fn augment_image<R: Rng>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Image {
    let out = random_resized_crop(img, policy.crop_scale, policy.crop_ratio, policy.out_size, rng);
    let out = horizontal_flip(&out, policy.p_flip, rng);
    let out = color_jitter(&out, policy.p_jitter, &policy.jitter, rng);
    let out = grayscale(&out, policy.p_gray, rng);
    gaussian_blur(&out, policy.p_blur, policy.blur_sigma, rng)
}

/// Augments each image `i` of the batch with its own stream `rng.substream(i)`.
pub fn apply_policy(batch: &ImageBatch, policy: &AugmentPolicy, rng: &SeededRng) -> Result<ImageBatch> {
    let keys: Vec<u64> = (0..batch.len() as u64).collect();
    apply_policy_keyed(batch, policy, rng, &keys)
}

/// Like [`apply_policy`], but image `i` draws from `rng.substream(keys[i])`.
pub fn apply_policy_keyed(batch: &ImageBatch, policy: &AugmentPolicy, rng: &SeededRng, keys: &[u64]) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Err(Error::Usage("cannot augment an empty batch".into()));
    }
    if keys.len() != batch.len() {
        return Err(Error::shape("augment keys", &[keys.len()], &[batch.len()]));
    }
    let mut out = ImageBatch::empty(batch.channels, policy.out_size.height, policy.out_size.width);
    for (i, &key) in keys.iter().enumerate() {
        let mut r = rng.substream(key).rng();
        out.push(&augment_image(&batch.image(i), policy, &mut r))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn full_area_crop_is_identity() {
        let img = random_image(1, 3, 12, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = random_resized_crop(&img, (1.0, 1.0), (1.0, 1.0), Size::new(12, 12), &mut rng);
        let diff = img.data.iter().zip(&out.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn crop_output_size_sweep() {
        let img = random_image(2, 3, 17, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let out = random_resized_crop(&img, (0.2, 1.0), (0.75, 4.0 / 3.0), Size::new(8, 10), &mut rng);
            assert_eq!((out.channels, out.height, out.width), (3, 8, 10));
        }
    }

    #[test]
    fn crop_fallback_on_extreme_ratio() {
        let img = random_image(2, 1, 4, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (top, left, h, w) = sample_crop(4, 40, (1.0, 1.0), (1.0, 1.0), &mut rng);
        assert!(top + h <= 4 && left + w <= 40);
        let out = random_resized_crop(&img, (1.0, 1.0), (1.0, 1.0), Size::new(2, 2), &mut rng);
        assert_eq!(out.data.len(), 4);
    }

    #[test]
    fn flip_cases() {
        let img = random_image(4, 3, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(horizontal_flip(&img, 0.0, &mut rng), img);
        let once = horizontal_flip(&img, 1.0, &mut rng);
        assert_ne!(once, img);
        assert_eq!(horizontal_flip(&once, 1.0, &mut rng), img);
    }

    #[test]
    fn flip_rate_monte_carlo() {
        let img = random_image(5, 1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flips = (0..10_000)
            .filter(|_| horizontal_flip(&img, 0.9, &mut rng) != img)
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((0.88..=0.92).contains(&rate), "{rate}");
    }

    #[test]
    fn grayscale_has_equal_channels() {
        let img = random_image(6, 3, 7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = grayscale(&img, 1.0, &mut rng);
        for k in 0..49 {
            assert_eq!(g.data[k], g.data[49 + k]);
            assert_eq!(g.data[k], g.data[98 + k]);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        for seed in 0..20 {
            let img = random_image(seed, 3, 32, 32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = gaussian_blur(&img, 1.0, (0.1, 2.0), &mut rng);
            let m0: f32 = img.data.iter().sum::<f32>() / img.data.len() as f32;
            let m1: f32 = out.data.iter().sum::<f32>() / out.data.len() as f32;
            assert!((m0 - m1).abs() < 1e-3, "{m0} vs {m1}");
        }
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(blur_kernel_size(16), 3);
        assert_eq!(blur_kernel_size(32), 3);
        assert_eq!(blur_kernel_size(64), 5);
        assert_eq!(blur_kernel_size(96), 9);
        assert_eq!(blur_kernel_size(100), 9);
    }

    #[test]
    fn jitter_keeps_range() {
        let img = random_image(7, 3, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let out = color_jitter(&img, 1.0, &JitterStrengths::default(), &mut rng);
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_probability_pipeline_is_identity() {
        let img = random_image(8, 3, 10, 10);
        let policy = AugmentPolicy {
            p_jitter: 0.0,
            p_gray: 0.0,
            p_blur: 0.0,
            ..AugmentPolicy::identity(Size::new(10, 10))
        };
        let batch = ImageBatch::from_images(&[img.clone()]).unwrap();
        let out = apply_policy(&batch, &policy, &SeededRng::new(4)).unwrap();
        let diff = out.image(0).data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::strong(Size::new(8, 8));
        assert!(p.validate().is_ok());
        p.crop_scale = (0.0, 1.0);
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::weak(Size::new(8, 8));
        p.p_flip = 1.5;
        assert!(p.validate().is_err());
    }
}
