//! Seeded four-step augmentation of an image and its label rasters.
//!
//! 1. Upscale by 2 (bilinear image, nearest-neighbour labels).
//! 2. Random rescale in `scale_range`, then a random `target_size` square
//!    crop, zero-padded where the window leaves the source.
//! 3. Random horizontal and/or vertical flip.
//! 4. One randomly chosen photometric op on the image only: Gaussian blur,
//!    median blur or additive Gaussian noise.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`. Batch item `i` uses seed `seed ^ i`.

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{check_dims, ClassId, LabeledScene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseOp {
    GaussianBlur,
    MedianBlur,
    AdditiveGaussianNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub target_size: u32,
    pub scale_range: (f64, f64),
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub noise_ops: Vec<NoiseOp>,
    /// Odd kernel sizes for Gaussian blur; sigma follows the OpenCV rule
    /// `0.3 * ((k - 1) / 2 - 1) + 0.8`.
    pub gaussian_blur_kernels: Vec<u32>,
    pub median_blur_kernels: Vec<u32>,
    /// Standard deviation range, in 8-bit intensity units.
    pub noise_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_size: 512,
            scale_range: (0.8, 1.2),
            horizontal_flip: true,
            vertical_flip: true,
            noise_ops: vec![NoiseOp::GaussianBlur, NoiseOp::MedianBlur, NoiseOp::AdditiveGaussianNoise],
            gaussian_blur_kernels: vec![3, 5],
            median_blur_kernels: vec![3, 5],
            noise_sigma: (0.0, 0.05 * 255.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.target_size == 0 {
            return bad("target_size must be positive".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("scale_range must satisfy 0 < low <= high, got ({lo}, {hi})"));
        }
        let (slo, shi) = self.noise_sigma;
        if !(slo.is_finite() && shi.is_finite() && slo >= 0.0 && slo <= shi) {
            return bad(format!("noise_sigma must satisfy 0 <= low <= high, got ({slo}, {shi})"));
        }
        for (op, kernels) in [
            (NoiseOp::GaussianBlur, &self.gaussian_blur_kernels),
            (NoiseOp::MedianBlur, &self.median_blur_kernels),
        ] {
            if !self.noise_ops.contains(&op) {
                continue;
            }
            if kernels.is_empty() || kernels.iter().any(|k| k % 2 == 0) {
                return bad(format!("{op:?} needs a non-empty list of odd kernel sizes, got {kernels:?}"));
            }
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize_bilinear(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = img.dimensions();
    let coord = |d: u32, src: u32, dst: u32| {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as u32;
        (i0, (i0 + 1).min(src - 1), s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| coord(x, sw, width)).collect();
    let mut out = RgbImage::new(width, height);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sh, height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b) = (img.get_pixel(x0, y0), img.get_pixel(x1, y0));
            let (c, d) = (img.get_pixel(x0, y1), img.get_pixel(x1, y1));
            let px = std::array::from_fn(|ch| {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x as u32, y, Rgb(px));
        }
    }
    out
}

/// Nearest-neighbour resize of both label rasters; output values are a
/// subset of the input values.
pub fn resize_labels(scene: &LabeledScene, width: u32, height: u32) -> LabeledScene {
    let (sw, sh) = scene.dims();
    // source index floor((d + 0.5) * src / dst), in integers
    let pick = |d: u32, src: u32, dst: u32| (((2 * d as u64 + 1) * src as u64) / (2 * dst as u64)) as u32;
    let xs: Vec<u32> = (0..width).map(|x| pick(x, sw, width)).collect();
    let n = width as usize * height as usize;
    let mut ids = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for y in 0..height {
        let sy = pick(y, sh, height);
        for &sx in &xs {
            ids.push(scene.instance_at(sx, sy));
            classes.push(scene.class_at(sx, sy));
        }
    }
    LabeledScene::new(width, height, ids, classes).expect("nearest resampling keeps pixel pairs intact")
}

pub fn upscale_2x(img: &RgbImage, scene: &LabeledScene) -> Result<(RgbImage, LabeledScene)> {
    check_dims("image", img.dimensions(), "labels", scene.dims())?;
    let (w, h) = scene.dims();
    Ok((resize_bilinear(img, 2 * w, 2 * h), resize_labels(scene, 2 * w, 2 * h)))
}

/// Copies the `size x size` window whose top-left corner sits at
/// `(left, top)` in source coordinates; outside pixels are zero.
pub fn crop_padded(img: &RgbImage, scene: &LabeledScene, left: i64, top: i64, size: u32) -> (RgbImage, LabeledScene) {
    let (sw, sh) = scene.dims();
    let n = size as usize * size as usize;
    let mut out = RgbImage::new(size, size);
    let mut ids = vec![0u32; n];
    let mut classes = vec![ClassId::BACKGROUND; n];
    for y in 0..size {
        let sy = top + y as i64;
        if sy < 0 || sy >= sh as i64 {
            continue;
        }
        for x in 0..size {
            let sx = left + x as i64;
            if sx < 0 || sx >= sw as i64 {
                continue;
            }
            let (sx, sy) = (sx as u32, sy as u32);
            out.put_pixel(x, y, *img.get_pixel(sx, sy));
            let i = y as usize * size as usize + x as usize;
            ids[i] = scene.instance_at(sx, sy);
            classes[i] = scene.class_at(sx, sy);
        }
    }
    let scene = LabeledScene::new(size, size, ids, classes).expect("cropping keeps pixel pairs intact");
    (out, scene)
}

pub fn random_scale_crop<R: Rng>(
    img: &RgbImage,
    scene: &LabeledScene,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(RgbImage, LabeledScene)> {
    cfg.validate()?;
    check_dims("image", img.dimensions(), "labels", scene.dims())?;
    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (w, h) = scene.dims();
    let sw = ((w as f64 * scale).round() as u32).max(1);
    let sh = ((h as f64 * scale).round() as u32).max(1);
    let (img, scene) = if (sw, sh) == (w, h) {
        (img.clone(), scene.clone())
    } else {
        (resize_bilinear(img, sw, sh), resize_labels(scene, sw, sh))
    };
    let size = cfg.target_size as i64;
    let mut offset = |dim: u32| {
        let slack = dim as i64 - size;
        let (a, b) = (slack.min(0), slack.max(0));
        if a == b {
            a
        } else {
            rng.random_range(a..=b)
        }
    };
    let left = offset(sw);
    let top = offset(sh);
    Ok(crop_padded(&img, &scene, left, top, cfg.target_size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlipDraw {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Each enabled axis flips with probability 1/2.
pub fn draw_flip<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> FlipDraw {
    FlipDraw {
        horizontal: cfg.horizontal_flip && rng.random_bool(0.5),
        vertical: cfg.vertical_flip && rng.random_bool(0.5),
    }
}

/// Applies the same flip to the image and both rasters. Horizontal maps
/// `(x, y)` to `(W - 1 - x, y)`.
pub fn apply_flip(img: &RgbImage, scene: &LabeledScene, draw: FlipDraw) -> (RgbImage, LabeledScene) {
    let (w, h) = scene.dims();
    let src = |x: u32, y: u32| {
        (
            if draw.horizontal { w - 1 - x } else { x },
            if draw.vertical { h - 1 - y } else { y },
        )
    };
    let out = RgbImage::from_fn(w, h, |x, y| {
        let (sx, sy) = src(x, y);
        *img.get_pixel(sx, sy)
    });
    let mut ids = Vec::with_capacity(scene.instance_map().len());
    let mut classes = Vec::with_capacity(ids.capacity());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            ids.push(scene.instance_at(sx, sy));
            classes.push(scene.class_at(sx, sy));
        }
    }
    let scene = LabeledScene::new(w, h, ids, classes).expect("flipping keeps pixel pairs intact");
    (out, scene)
}

pub fn random_flip<R: Rng>(
    img: &RgbImage,
    scene: &LabeledScene,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(RgbImage, LabeledScene)> {
    check_dims("image", img.dimensions(), "labels", scene.dims())?;
    let draw = draw_flip(cfg, rng);
    Ok(apply_flip(img, scene, draw))
}

fn gaussian_kernel(size: u32) -> Vec<f64> {
    let sigma = 0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (size / 2) as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &RgbImage, kernel_size: u32) -> RgbImage {
    let kernel = gaussian_kernel(kernel_size);
    let r = (kernel_size / 2) as i64;
    let (w, h) = img.dimensions();
    let clamp = |v: i64, n: u32| v.clamp(0, n as i64 - 1) as u32;
    let mut horizontal = vec![[0.0f64; 3]; w as usize * h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, wk) in kernel.iter().enumerate() {
                let p = img.get_pixel(clamp(x as i64 + k as i64 - r, w), y);
                for ch in 0..3 {
                    acc[ch] += wk * p[ch] as f64;
                }
            }
            horizontal[(y * w + x) as usize] = acc;
        }
    }
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0; 3];
        for (k, wk) in kernel.iter().enumerate() {
            let row = &horizontal[(clamp(y as i64 + k as i64 - r, h) * w + x) as usize];
            for ch in 0..3 {
                acc[ch] += wk * row[ch];
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

/// Per-channel median over a square window with replicated borders.
pub fn median_blur(img: &RgbImage, kernel_size: u32) -> RgbImage {
    let r = (kernel_size / 2) as i64;
    let (w, h) = img.dimensions();
    let clamp = |v: i64, n: u32| v.clamp(0, n as i64 - 1) as u32;
    let mut window: Vec<u8> = Vec::with_capacity((kernel_size * kernel_size) as usize);
    RgbImage::from_fn(w, h, |x, y| {
        Rgb(std::array::from_fn(|ch| {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window.push(img.get_pixel(clamp(x as i64 + dx, w), clamp(y as i64 + dy, h))[ch]);
                }
            }
            let mid = window.len() / 2;
            *window.select_nth_unstable(mid).1
        }))
    })
}

/// Adds independent `N(0, sigma)` noise to every channel, rounding and
/// clamping to 8 bits.
pub fn additive_gaussian_noise<R: Rng>(img: &RgbImage, sigma: f64, rng: &mut R) -> Result<RgbImage> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma {sigma}: {e}")))?;
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Applies one op drawn uniformly from `cfg.noise_ops`; identity when the
/// list is empty.
pub fn random_noise<R: Rng>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> Result<RgbImage> {
    cfg.validate()?;
    let Some(&op) = cfg.noise_ops.choose(rng) else {
        return Ok(img.clone());
    };
    Ok(match op {
        NoiseOp::GaussianBlur => {
            let k = *cfg.gaussian_blur_kernels.choose(rng).expect("validated non-empty");
            gaussian_blur(img, k)
        }
        NoiseOp::MedianBlur => {
            let k = *cfg.median_blur_kernels.choose(rng).expect("validated non-empty");
            median_blur(img, k)
        }
        NoiseOp::AdditiveGaussianNoise => {
            let (lo, hi) = cfg.noise_sigma;
            let sigma = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            additive_gaussian_noise(img, sigma, rng)?
        }
    })
}

/// Runs all four steps with an rng seeded from `cfg.seed`.
pub fn augment(img: &RgbImage, scene: &LabeledScene, cfg: &AugmentConfig) -> Result<(RgbImage, LabeledScene)> {
    let mut rng = cfg.rng();
    augment_with(img, scene, cfg, &mut rng)
}

pub fn augment_with<R: Rng>(
    img: &RgbImage,
    scene: &LabeledScene,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(RgbImage, LabeledScene)> {
    cfg.validate()?;
    let (img, scene) = upscale_2x(img, scene)?;
    let (img, scene) = random_scale_crop(&img, &scene, cfg, rng)?;
    let (img, scene) = random_flip(&img, &scene, cfg, rng)?;
    let img = random_noise(&img, cfg, rng)?;
    Ok((img, scene))
}

/// Augments every pair in parallel; item `i` is seeded with `cfg.seed ^ i`.
pub fn augment_batch(items: &[(RgbImage, LabeledScene)], cfg: &AugmentConfig) -> Result<Vec<(RgbImage, LabeledScene)>> {
    cfg.validate()?;
    items
        .par_iter()
        .enumerate()
        .map(|(i, (img, scene))| {
            let item_cfg = AugmentConfig {
                seed: cfg.seed ^ i as u64,
                ..cfg.clone()
            };
            augment(img, scene, &item_cfg)
        })
        .collect()
}
