//! Optional photometric/geometric pre-augmentations applied before the
//! style stage: color jitter, Gaussian blur, random crop and horizontal flip.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::synthetic::{LabelMap, LabeledImage};
use crate::tensor::Tensor;

pub const JITTER_RANGE: (f32, f32) = (0.6, 1.4);
pub const BLUR_SIGMA_RANGE: (f32, f32) = (0.1, 1.0);
pub const FLIP_PROB: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreAugConfig {
    pub color_jitter: bool,
    pub blur: bool,
    pub flip: bool,
    /// Output `(height, width)` of a random crop.
    pub crop: Option<(usize, usize)>,
}

impl PreAugConfig {
    pub fn is_noop(&self) -> bool {
        !self.color_jitter && !self.blur && !self.flip && self.crop.is_none()
    }
}

/// Brightness then contrast (around the image's gray mean), clamped to `[0, 1]`.
pub fn color_jitter(img: &mut Tensor<f32>, brightness: f32, contrast: f32) {
    let n = img.numel().max(1) as f32;
    let d = img.data_mut();
    d.iter_mut().for_each(|v| *v *= brightness);
    let mean = d.iter().sum::<f32>() / n;
    d.iter_mut()
        .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
}

fn gaussian_taps(k: usize, sigma: f32) -> Vec<f32> {
    let r = (k / 2) as i64;
    let taps: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with edge clamping on a `[C, H, W]` image.
pub fn gaussian_blur(img: &Tensor<f32>, k: usize, sigma: f32) -> Result<Tensor<f32>> {
    if k % 2 == 0 || !(sigma > 0.0) {
        return Err(invalid(format!("blur needs an odd kernel and sigma > 0, got {k}, {sigma}")));
    }
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = gaussian_taps(k, sigma);
    let r = (k / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, wt) in taps.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += wt * src[(ch * h + y) * w + xx];
                }
                tmp[(ch * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, wt) in taps.iter().enumerate() {
                    let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += wt * tmp[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

pub fn hflip(x: &LabeledImage) -> Result<LabeledImage> {
    let s = x.image.shape();
    let (h, w) = (s[1], s[2]);
    let img = Tensor::from_fn(s.to_vec(), |i| {
        let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.image.data()[(ch * h + y) * w + (w - 1 - xx)]
    });
    let labels = (0..h * w)
        .map(|i| x.label.data[(i / w) * w + (w - 1 - i % w)])
        .collect();
    LabeledImage::new(img, LabelMap::new(h, w, labels)?)
}

pub fn crop(x: &LabeledImage, top: usize, left: usize, ch: usize, cw: usize) -> Result<LabeledImage> {
    let s = x.image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(invalid(format!("crop {ch}x{cw}+{top}+{left} outside {h}x{w}")));
    }
    let img = Tensor::from_fn(vec![c, ch, cw], |i| {
        let (k, y, xx) = (i / (ch * cw), (i / cw) % ch, i % cw);
        x.image.data()[(k * h + top + y) * w + left + xx]
    });
    let labels = (0..ch * cw)
        .map(|i| x.label.data[(top + i / cw) * w + left + i % cw])
        .collect();
    LabeledImage::new(img, LabelMap::new(ch, cw, labels)?)
}

/// Applies the enabled pre-augmentations in the order crop, flip, jitter, blur.
pub fn pre_augment<R: Rng>(x: &LabeledImage, cfg: &PreAugConfig, rng: &mut R) -> Result<LabeledImage> {
    let mut out = x.clone();
    if let Some((ch, cw)) = cfg.crop {
        let s = out.image.shape();
        let (h, w) = (s[1], s[2]);
        if ch > h || cw > w {
            return Err(invalid(format!("crop {ch}x{cw} larger than image {h}x{w}")));
        }
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        out = crop(&out, top, left, ch, cw)?;
    }
    if cfg.flip && rng.gen_bool(FLIP_PROB) {
        out = hflip(&out)?;
    }
    if cfg.color_jitter {
        let b = rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        let c = rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        let mut img = out.image.detached();
        color_jitter(&mut img, b, c);
        out = out.restyled(img)?;
    }
    if cfg.blur {
        let k = if rng.gen_bool(0.5) { 3 } else { 5 };
        let sigma = rng.gen_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1);
        let img = gaussian_blur(&out.image, k, sigma)?;
        out = out.restyled(img)?;
    }
    Ok(out)
}
