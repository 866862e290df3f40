//! Tiered image augmentation.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::AugmentationLevel;

/// Per-transform probabilities and magnitudes. Magnitudes are symmetric
/// ranges: a rotation of 10 means an angle drawn from [-10, 10] degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub level: AugmentationLevel,
    pub flip_p: f64,
    pub rotation_deg: f64,
    /// Fractional brightness change, e.g. 0.1 for +-10%.
    pub brightness: f64,
    pub contrast: f64,
    pub blur_p: f64,
    pub blur_max_sigma: f64,
    pub noise_p: f64,
    /// Noise standard deviation as a fraction of the full 0..255 range.
    pub noise_sigma: f64,
}

impl AugmentationPolicy {
    pub fn for_level(level: AugmentationLevel) -> Self {
        let base = AugmentationPolicy {
            level,
            flip_p: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            blur_p: 0.0,
            blur_max_sigma: 0.0,
            noise_p: 0.0,
            noise_sigma: 0.0,
        };
        match level {
            AugmentationLevel::None => base,
            AugmentationLevel::Light => AugmentationPolicy {
                flip_p: 0.5,
                rotation_deg: 10.0,
                brightness: 0.1,
                contrast: 0.1,
                ..base
            },
            AugmentationLevel::Medium => AugmentationPolicy {
                flip_p: 0.5,
                rotation_deg: 20.0,
                brightness: 0.2,
                contrast: 0.2,
                blur_p: 0.3,
                blur_max_sigma: 1.0,
                noise_p: 0.3,
                noise_sigma: 0.02,
                ..base
            },
            AugmentationLevel::Strong => AugmentationPolicy {
                flip_p: 0.5,
                rotation_deg: 30.0,
                brightness: 0.3,
                contrast: 0.3,
                blur_p: 0.5,
                blur_max_sigma: 1.0,
                noise_p: 0.5,
                noise_sigma: 0.05,
                ..base
            },
        }
    }

    /// Horizontal flips only.
    pub fn flip_only(p: f64) -> Self {
        AugmentationPolicy {
            flip_p: p,
            ..Self::for_level(AugmentationLevel::None)
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_p == 0.0
            && self.rotation_deg == 0.0
            && self.brightness == 0.0
            && self.contrast == 0.0
            && self.blur_p == 0.0
            && self.noise_p == 0.0
    }
}

/// Seed for one sample in one epoch of one run. Independent of worker
/// count or iteration order.
pub fn sample_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Apply `policy` to `image`, deterministically in `seed`.
pub fn augment(image: &RgbImage, policy: &AugmentationPolicy, seed: u64) -> RgbImage {
    if policy.is_identity() {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = image.dimensions();
    let mut buf: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();

    if rng.random_bool(policy.flip_p.clamp(0.0, 1.0)) {
        flip_horizontal(&mut buf, w as usize, h as usize);
    }
    if policy.rotation_deg > 0.0 {
        let angle = rng.random_range(-policy.rotation_deg..=policy.rotation_deg);
        buf = rotate(&buf, w as usize, h as usize, angle.to_radians());
    }
    if policy.brightness > 0.0 {
        let b = 1.0 + rng.random_range(-policy.brightness..=policy.brightness);
        buf.iter_mut().for_each(|v| *v *= b);
    }
    if policy.contrast > 0.0 {
        let c = 1.0 + rng.random_range(-policy.contrast..=policy.contrast);
        let mean = buf.iter().sum::<f64>() / buf.len().max(1) as f64;
        buf.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    }
    if policy.blur_p > 0.0 && rng.random_bool(policy.blur_p) {
        let sigma = rng.random_range(0.0..policy.blur_max_sigma);
        if sigma > 0.05 {
            buf = gaussian_blur(&buf, w as usize, h as usize, sigma);
        }
    }
    if policy.noise_p > 0.0 && rng.random_bool(policy.noise_p) {
        let normal = Normal::new(0.0, policy.noise_sigma * 255.0).expect("valid sigma");
        buf.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    let raw: Vec<u8> = buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(w, h, raw).expect("buffer matches dimensions")
}

fn flip_horizontal(buf: &mut [f64], w: usize, h: usize) {
    for y in 0..h {
        for x in 0..w / 2 {
            for c in 0..3 {
                buf.swap((y * w + x) * 3 + c, (y * w + (w - 1 - x)) * 3 + c);
            }
        }
    }
}

fn sample_clamped(buf: &[f64], w: usize, h: usize, x: f64, y: f64, c: usize) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| buf[(yy * w + xx) * 3 + c];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image center, bilinear, with edge-clamped fill.
fn rotate(buf: &[f64], w: usize, h: usize, radians: f64) -> Vec<f64> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = radians.sin_cos();
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse mapping
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            for ch in 0..3 {
                out[(y * w + x) * 3 + ch] = sample_clamped(buf, w, h, sx, sy, ch);
            }
        }
    }
    out
}

fn gaussian_blur(buf: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let o = ki as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w as isize - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h as isize - 1))
                        };
                        acc += k * src[(sy as usize * w + sx as usize) * 3 + ch];
                    }
                    out[(y as usize * w + x as usize) * 3 + ch] = acc;
                }
            }
        }
        out
    };
    pass(&pass(buf, true), false)
}

/// Mean absolute per-channel difference between two same-size images.
pub fn mean_l1(a: &RgbImage, b: &RgbImage) -> f64 {
    let total: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(x, y)| u64::from(x.abs_diff(*y)))
        .sum();
    total as f64 / a.as_raw().len().max(1) as f64
}

/// Solid-color image, handy for tests and examples.
pub fn constant_image(dim: u32, color: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(dim, dim, Rgb(color))
}
