//! Two-view augmentation pipeline.
//!
//! Order per view: random resized crop (bilinear), horizontal flip, color
//! jitter, Gaussian blur, solarization, then float conversion with
//! per-channel normalization. Every draw comes from a ChaCha stream seeded
//! per (sample, view), so the pipeline is a pure function of
//! (image, parameters, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChannelStats, DataError, ImageU8, Result};
use crate::tensor::Tensor;
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub min_scale: f64,
    pub crop_size: usize,
    pub crop_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_apply_p: f64,
    pub blur_p: f64,
    pub solarize_p: f64,
    pub hflip_p: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::view1(32)
    }
}

impl AugmentParams {
    /// First-view defaults (blur always on, no solarization).
    pub fn view1(crop_size: usize) -> Self {
        AugmentParams {
            min_scale: 0.2,
            crop_size,
            crop_p: 1.0,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            jitter_apply_p: 0.8,
            blur_p: 1.0,
            solarize_p: 0.0,
            hflip_p: 0.5,
        }
    }

    /// Second-view defaults (rare blur, occasional solarization).
    pub fn view2(crop_size: usize) -> Self {
        AugmentParams {
            blur_p: 0.1,
            solarize_p: 0.2,
            ..Self::view1(crop_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.crop_p,
            self.jitter_apply_p,
            self.blur_p,
            self.solarize_p,
            self.hflip_p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::InvalidParams("probabilities must be in [0, 1]".into()));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) {
            return Err(DataError::InvalidParams("min_scale must be in (0, 1]".into()));
        }
        if self.hue > 0.5 || self.hue < 0.0 {
            return Err(DataError::InvalidParams("hue must be in [0, 0.5]".into()));
        }
        if self.crop_size == 0 {
            return Err(DataError::InvalidParams("crop_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Two augmented, normalized views of the same source image, `[3, S, S]`.
pub struct ViewPair {
    pub x1: Tensor<f32>,
    pub x2: Tensor<f32>,
}

/// Crop rectangle (y0, x0, h, w) fully inside the source, with area ratio
/// in [min_scale, 1] and aspect drawn log-uniformly in [3/4, 4/3]. Falls
/// back to the whole image after 10 rejected attempts.
pub(crate) fn sample_crop_rect(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    min_scale: f64,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(min_scale..=1.0);
        let aspect = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let ratio = (cw * ch) as f64 / area;
            if (min_scale..=1.0).contains(&ratio) {
                let x0 = rng.gen_range(0..=(w - cw));
                let y0 = rng.gen_range(0..=(h - ch));
                return (y0, x0, ch, cw);
            }
        }
    }
    (0, 0, h, w)
}

/// Bilinear resample of a source rectangle to `size x size` (half-pixel
/// centers, clamped edges). Works on byte-scale floats.
fn resize_rect(img: &ImageU8, rect: (usize, usize, usize, usize), size: usize) -> Vec<f32> {
    let (y0, x0, ch, cw) = rect;
    let mut out = vec![0.0f32; size * size * 3];
    for dy in 0..size {
        let sy = (dy as f64 + 0.5) * ch as f64 / size as f64 - 0.5;
        let syc = sy.clamp(0.0, (ch - 1) as f64);
        let ty = syc.floor() as usize;
        let by = (ty + 1).min(ch - 1);
        let fy = (syc - ty as f64) as f32;
        for dx in 0..size {
            let sx = (dx as f64 + 0.5) * cw as f64 / size as f64 - 0.5;
            let sxc = sx.clamp(0.0, (cw - 1) as f64);
            let lx = sxc.floor() as usize;
            let rx = (lx + 1).min(cw - 1);
            let fx = (sxc - lx as f64) as f32;
            for c in 0..3 {
                let p = |y: usize, x: usize| img.get(y0 + y, x0 + x, c) as f32;
                let top = p(ty, lx) * (1.0 - fx) + p(ty, rx) * fx;
                let bot = p(by, lx) * (1.0 - fx) + p(by, rx) * fx;
                out[(dy * size + dx) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn hflip(buf: &mut [f32], size: usize) {
    for y in 0..size {
        for x in 0..size / 2 {
            let a = (y * size + x) * 3;
            let b = (y * size + (size - 1 - x)) * 3;
            for c in 0..3 {
                buf.swap(a + c, b + c);
            }
        }
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn clamp_all(buf: &mut [f32]) {
    for v in buf.iter_mut() {
        *v = v.clamp(0.0, 255.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, hue in fixed order, each factor drawn
/// uniformly within its intensity.
fn color_jitter(buf: &mut [f32], p: &AugmentParams, rng: &mut ChaCha8Rng) {
    let fb = 1.0 + rng.gen_range(-p.brightness..=p.brightness) as f32;
    for v in buf.iter_mut() {
        *v *= fb;
    }
    clamp_all(buf);

    let fc = 1.0 + rng.gen_range(-p.contrast..=p.contrast) as f32;
    let mean: f32 = buf.chunks_exact(3).map(luma).sum::<f32>() / (buf.len() / 3) as f32;
    for v in buf.iter_mut() {
        *v = mean + (*v - mean) * fc;
    }
    clamp_all(buf);

    let fs = 1.0 + rng.gen_range(-p.saturation..=p.saturation) as f32;
    for px in buf.chunks_exact_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = g + (*v - g) * fs;
        }
    }
    clamp_all(buf);

    let shift = rng.gen_range(-p.hue..=p.hue) as f32;
    for px in buf.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r * 255.0;
        px[1] = g * 255.0;
        px[2] = b * 255.0;
    }
    clamp_all(buf);
}

/// Separable Gaussian blur; kernel extent is 10% of the image size rounded
/// odd (floor 3), edges clamped.
fn gaussian_blur(buf: &mut Vec<f32>, size: usize, sigma: f32) {
    let mut k = ((0.1 * size as f64).round() as usize) | 1;
    if k < 3 {
        k = 3;
    }
    let half = (k / 2) as isize;
    let mut weights = vec![0.0f32; k];
    let mut sum = 0.0f32;
    for (i, w) in weights.iter_mut().enumerate() {
        let d = i as f32 - half as f32;
        *w = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0f32; buf.len()];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for (i, w) in weights.iter().enumerate() {
                    let sx = clamp(x as isize + i as isize - half);
                    acc += w * buf[(y * size + sx) * 3 + c];
                }
                tmp[(y * size + x) * 3 + c] = acc;
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for (i, w) in weights.iter().enumerate() {
                    let sy = clamp(y as isize + i as isize - half);
                    acc += w * tmp[(sy * size + x) * 3 + c];
                }
                buf[(y * size + x) * 3 + c] = acc;
            }
        }
    }
}

/// Byte-scale solarization: values at or above the 128 threshold invert.
pub fn solarize_value(v: f32) -> f32 {
    if v >= 128.0 {
        255.0 - v
    } else {
        v
    }
}

fn augment_one(
    img: &ImageU8,
    p: &AugmentParams,
    seed: u64,
    stats: &ChannelStats,
) -> Result<Tensor<f32>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = p.crop_size;

    let rect = if rng.gen::<f64>() < p.crop_p {
        sample_crop_rect(&mut rng, img.height, img.width, p.min_scale)
    } else {
        (0, 0, img.height, img.width)
    };
    let mut buf = resize_rect(img, rect, size);

    if rng.gen::<f64>() < p.hflip_p {
        hflip(&mut buf, size);
    }
    if rng.gen::<f64>() < p.jitter_apply_p {
        color_jitter(&mut buf, p, &mut rng);
    }
    if rng.gen::<f64>() < p.blur_p {
        let sigma = rng.gen_range(0.1..=2.0) as f32;
        gaussian_blur(&mut buf, size, sigma);
    }
    if rng.gen::<f64>() < p.solarize_p {
        for v in buf.iter_mut() {
            *v = solarize_value(*v);
        }
    }

    // Float conversion + per-channel normalization, channel-first layout.
    let mut out = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        let mean = stats.mean[c] as f32;
        let std = stats.std[c] as f32;
        for y in 0..size {
            for x in 0..size {
                out[(c * size + y) * size + x] = (buf[(y * size + x) * 3 + c] / 255.0 - mean) / std;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, size, size], out).expect("fixed view shape"))
}

/// Builds the two views of one source image; fully deterministic in
/// `rng_seed` (each view gets its own derived stream).
pub fn make_views(
    img: &ImageU8,
    p1: &AugmentParams,
    p2: &AugmentParams,
    rng_seed: u64,
    stats: &ChannelStats,
) -> Result<ViewPair> {
    let x1 = augment_one(img, p1, util::subseed(rng_seed, 1), stats)?;
    let x2 = augment_one(img, p2, util::subseed(rng_seed, 2), stats)?;
    Ok(ViewPair { x1, x2 })
}
